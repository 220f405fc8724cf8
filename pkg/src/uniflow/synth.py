"""Seeded synthetic grid and graph flow generators.

All randomness comes from numpy's Philox-4x64 counter-based bit generator,
keyed by the configured 64-bit seed, so streams are reproducible across
platforms and reimplementable in other languages.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import GRAPH, GRID, DatasetMeta, FlowDataset, GraphTopology, GridSpec


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    T: int = 2000
    period_daily: int = 24
    period_weekly: int = 168
    amplitude: float = 1.0
    hotspot_count: int = 2
    hotspot_speed: float = 0.25
    noise_std: float = 0.05
    # extensions beyond the base knobs
    base_level: float = 1.5
    weekly_amplitude: float = 0.1
    phase_spread: float = 1.0
    diffusion: float = 0.3
    interval: str = "1step"

    def validate(self) -> "SynthConfig":
        if self.period_daily < 2:
            raise ValueError("period_daily must be >= 2")
        if self.T < self.period_daily:
            raise ValueError("T must cover at least one daily period")
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")
        if self.hotspot_count < 0 or self.noise_std < 0:
            raise ValueError("hotspot_count and noise_std must be non-negative")
        if self.period_weekly < 1:
            raise ValueError("period_weekly must be positive")
        if not 0.0 <= self.diffusion <= 1.0:
            raise ValueError("diffusion must lie in [0, 1]")
        return self


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def _smooth_field(rng, coords: np.ndarray, n_waves: int = 3) -> np.ndarray:
    """Random smooth scalar field in [-1, 1] evaluated at ``coords`` (n x 2, unit scale)."""
    freqs = rng.normal(0.0, 1.0, size=(n_waves, 2)) * np.pi
    offs = rng.uniform(0.0, 2 * np.pi, size=n_waves)
    field = np.cos(coords @ freqs.T + offs).mean(axis=1)
    return field


def _periodic_base(cfg: SynthConfig, t: np.ndarray, phase: np.ndarray, wphase: np.ndarray) -> np.ndarray:
    """``T x n`` daily + weekly harmonics with per-location phases."""
    daily = np.sin(2 * np.pi * t[:, None] / cfg.period_daily + phase[None, :])
    weekly = np.sin(2 * np.pi * t[:, None] / cfg.period_weekly + wphase[None, :])
    return cfg.amplitude * (cfg.base_level + daily + cfg.weekly_amplitude * weekly)


def _hotspots(cfg: SynthConfig, rng, t: np.ndarray, coords: np.ndarray, extent: float, width: float) -> np.ndarray:
    """Gaussian bumps circling on orbits that close once per daily period."""
    out = np.zeros((t.size, coords.shape[0]))
    if cfg.hotspot_count == 0:
        return out
    radius = cfg.hotspot_speed * cfg.period_daily / (2 * np.pi)
    for _ in range(cfg.hotspot_count):
        center = rng.uniform(0.25 * extent, 0.75 * extent, size=2)
        theta0 = rng.uniform(0.0, 2 * np.pi)
        strength = rng.uniform(0.5, 1.5)
        theta = theta0 + 2 * np.pi * t / cfg.period_daily
        pos = center[None, :] + radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        d2 = ((coords[None, :, :] - pos[:, None, :]) ** 2).sum(-1)
        out += cfg.amplitude * strength * np.exp(-d2 / (2 * width**2))
    return out


def _finish(values: np.ndarray, cfg: SynthConfig, rng) -> np.ndarray:
    if cfg.noise_std > 0:
        values = values + rng.normal(0.0, cfg.noise_std, size=values.shape)
    return np.maximum(values, 0.0).astype(np.float32)


def gen_grid(cfg: SynthConfig, height: int, width: int, name: str = "grid") -> FlowDataset:
    cfg.validate()
    if height < 1 or width < 1:
        raise ValueError("grid dimensions must be positive")
    rng = make_rng(cfg.seed)
    hh, ww = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    coords = np.stack([hh.ravel(), ww.ravel()], axis=1).astype(np.float64)
    unit = coords / max(height, width)
    phase = cfg.phase_spread * np.pi * _smooth_field(rng, unit)
    wphase = cfg.phase_spread * np.pi * _smooth_field(rng, unit)
    t = np.arange(cfg.T, dtype=np.float64)
    x = _periodic_base(cfg, t, phase, wphase)
    x += _hotspots(cfg, rng, t, coords, extent=float(min(height, width)), width=1.5)
    values = _finish(x, cfg, rng)[:, :, None]
    return FlowDataset(
        name=name,
        kind=GRID,
        values=values,
        meta=DatasetMeta.describe(values, cfg.interval),
        grid_spec=GridSpec(height, width),
    )


# ---------------------------------------------------------------------------
# graphs


def _components(n: int, edges) -> list[int]:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    return [find(i) for i in range(n)]


def random_geometric_graph(rng, num_nodes: int, avg_degree: float) -> tuple[np.ndarray, GraphTopology]:
    """Points in the unit square joined within a radius tuned to ``avg_degree``,
    then patched into one connected component by nearest cross-component links."""
    pos = rng.uniform(0.0, 1.0, size=(num_nodes, 2))
    radius = np.sqrt(avg_degree / (np.pi * (num_nodes - 1)))
    d = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    iu, ju = np.triu_indices(num_nodes, k=1)
    close = d[iu, ju] < radius
    edges = list(zip(iu[close].tolist(), ju[close].tolist()))
    while True:
        comp = np.asarray(_components(num_nodes, edges))
        if np.all(comp == comp[0]):
            break
        inside = comp == comp[0]
        sub = d[np.ix_(inside, ~inside)]
        a, b = np.unravel_index(np.argmin(sub), sub.shape)
        i = int(np.flatnonzero(inside)[a])
        j = int(np.flatnonzero(~inside)[b])
        edges.append((min(i, j), max(i, j)))
    edges.sort()
    return pos, GraphTopology.from_edges(num_nodes, edges)


def diffusion_operator(topology: GraphTopology, lam: float) -> np.ndarray:
    """Column-stochastic lazy random-walk transfer ``(1-lam) I + lam A D^-1``.

    Each node keeps ``1-lam`` of its mass and spreads ``lam`` evenly over its
    neighbours, so the total is preserved.
    """
    a = topology.adjacency()
    deg = a.sum(axis=0)
    spread = np.divide(a, deg[None, :], out=np.zeros_like(a), where=deg[None, :] > 0)
    # isolated nodes keep their mass
    isolated = deg == 0
    op = (1.0 - lam) * np.eye(topology.num_nodes) + lam * spread
    op[isolated, isolated] = 1.0
    return op


def diffuse(x: np.ndarray, op: np.ndarray) -> np.ndarray:
    return op @ x


def source_period(cfg: SynthConfig) -> int:
    """Smallest period shared by every source component."""
    if cfg.weekly_amplitude == 0:
        return cfg.period_daily
    return int(np.lcm(cfg.period_daily, cfg.period_weekly))


def settle(op: np.ndarray, src_cycle: np.ndarray, x0: np.ndarray, max_doublings: int = 40,
           tol: float = 1e-12) -> np.ndarray:
    """State at a cycle boundary after the forced diffusion has settled.

    One cycle of ``x <- M x + (s[k] - s[k-1])`` is the affine map
    ``x -> A x + c``; repeated squaring of that map reaches the periodic
    regime after ``2**j`` cycles in ``j`` steps.
    """
    n = op.shape[0]
    steps = np.diff(np.concatenate([src_cycle, src_cycle[:1]]), axis=0)
    A = np.eye(n)
    c = np.zeros(n)
    for ds in steps:
        A = op @ A
        c = op @ c + ds
    x = x0
    for _ in range(max_doublings):
        nxt = A @ x + c
        if np.max(np.abs(nxt - x)) < tol:
            return nxt
        c = A @ c + c
        A = A @ A
        x = nxt
    return x


def gen_graph(cfg: SynthConfig, num_nodes: int, avg_degree: float, name: str = "graph") -> FlowDataset:
    """Periodic node sources whose changes spread one hop per step.

    State update: ``x[t+1] = M x[t] + (s[t+1] - s[t])`` with ``M`` the
    mass-preserving diffusion operator.  The series starts from the settled
    periodic state, so it is exactly periodic when noise-free.
    """
    cfg.validate()
    if num_nodes < 4:
        raise ValueError("num_nodes must be >= 4")
    if not 2 <= avg_degree < num_nodes:
        raise ValueError("avg_degree must satisfy 2 <= avg_degree < num_nodes")
    rng = make_rng(cfg.seed)
    pos, topo = random_geometric_graph(rng, num_nodes, avg_degree)
    phase = cfg.phase_spread * np.pi * _smooth_field(rng, pos)
    wphase = cfg.phase_spread * np.pi * _smooth_field(rng, pos)
    period = source_period(cfg)
    t = np.arange(max(cfg.T, period), dtype=np.float64)
    src = _periodic_base(cfg, t, phase, wphase)
    hop = np.sqrt(avg_degree / (np.pi * (num_nodes - 1)))
    src += _hotspots(replace(cfg, hotspot_speed=cfg.hotspot_speed * hop), rng, t, pos, extent=1.0, width=2 * hop)

    op = diffusion_operator(topo, cfg.diffusion)
    x = np.empty((cfg.T, num_nodes))
    x[0] = settle(op, src[:period], src[0]) if cfg.diffusion > 0 else src[0]
    for k in range(1, cfg.T):
        x[k] = diffuse(x[k - 1], op) + (src[k] - src[k - 1])
    values = _finish(x, cfg, rng)[:, :, None]
    return FlowDataset(
        name=name,
        kind=GRAPH,
        values=values,
        meta=DatasetMeta.describe(values, cfg.interval),
        topology=topo,
    )


# ---------------------------------------------------------------------------
# catalogue

TARGET_MARKER = "target"


def gen_suite(seed: int = 0, T: int = 2000) -> list[FlowDataset]:
    """Four training datasets (two grids, two graphs) plus one held-out target grid."""
    base = SynthConfig(seed=0, T=T)

    def cfg(i, **kw):
        return replace(base, seed=(int(seed) * 1000003 + i) & 0xFFFFFFFFFFFFFFFF, **kw)

    return [
        gen_grid(cfg(1, amplitude=20.0, hotspot_count=2, noise_std=1.0), 8, 8, name="grid8x8"),
        gen_grid(cfg(2, amplitude=50.0, hotspot_count=3, hotspot_speed=0.3, noise_std=2.5, phase_spread=0.6),
                 10, 12, name="grid10x12"),
        gen_graph(cfg(3, amplitude=2.0, hotspot_count=1, noise_std=0.08, diffusion=0.3), 60, 4.0, name="graph60"),
        gen_graph(cfg(4, amplitude=5.0, hotspot_count=2, noise_std=0.2, diffusion=0.5, phase_spread=1.5),
                  120, 5.0, name="graph120"),
        gen_grid(cfg(5, amplitude=30.0, hotspot_count=2, noise_std=1.5, phase_spread=0.8), 8, 10,
                 name=f"grid8x10_{TARGET_MARKER}"),
    ]
