"""Keyed random streams.

Each resampling path owns a Philox stream keyed by ``(seed, path_id)``;
shared tables (the bootstrap covariate stream) are keyed by ``seed`` alone.
A path's draws therefore never depend on which other paths run alongside
it, how they are chunked, or in which order chunks execute.
"""

from __future__ import annotations

import numpy as np

_PATH, _SHARED_COV, _PATH_COV, _AUX = 0, 1, 2, 3

BLOCK_STEPS = 64


def keyed_generator(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))))


def path_generator(seed: int, path_id: int) -> np.random.Generator:
    return keyed_generator(seed, _PATH, path_id)


def aux_generator(seed: int, tag: int) -> np.random.Generator:
    """Streams for things outside the paths (MCMC, subsampling, ...)."""
    return keyed_generator(seed, _AUX, tag)


def covariate_table(seed: int, n_rows: int, horizon: int, path_id: int | None = None) -> np.ndarray:
    """Bootstrap row indices for steps ``0..horizon-1``.

    With ``path_id=None`` the table is shared by every path and entry i is a
    function of ``(seed, i)`` only; otherwise of ``(seed, path_id, i)``.
    Longer horizons extend shorter ones (prefix property).
    """
    if n_rows < 1:
        raise ValueError("bootstrap needs at least one observed row")
    gen = keyed_generator(seed, _SHARED_COV) if path_id is None else keyed_generator(seed, _PATH_COV, path_id)
    # fixed-width uniforms keep the prefix property regardless of n_rows
    u = gen.random(horizon)
    return np.minimum((u * n_rows).astype(np.int64), n_rows - 1)


class PathNoise:
    """Per-path standard-normal and uniform draws served in fixed step blocks.

    ``normals`` and ``uniforms`` give the per-step widths. Row t of the block
    arrays for a path depends only on ``(seed, path_id, t)``.
    """

    def __init__(self, seed: int, path_ids, normals: int, uniforms: int, block: int = BLOCK_STEPS):
        self.gens = [path_generator(seed, pid) for pid in np.asarray(path_ids).ravel()]
        self.normals, self.uniforms, self.block = int(normals), int(uniforms), int(block)
        self._start = None
        self._z = self._u = None

    def _fill(self, start):
        k = len(self.gens)
        self._z = np.empty((k, self.block, self.normals))
        self._u = np.empty((k, self.block, self.uniforms))
        for c, g in enumerate(self.gens):
            self._z[c] = g.standard_normal((self.block, self.normals))
            self._u[c] = g.random((self.block, self.uniforms))
        self._start = start

    def step(self, t: int):
        """(normals, uniforms) for step ``t``; steps must be visited in order."""
        if self._start is None or t >= self._start + self.block:
            self._fill(t - t % self.block)
        j = t - self._start
        return self._z[:, j], self._u[:, j]
