"""Synthetic ground-truth world: a quasi-static mass-spring rim loop held at
two rigid handle arcs, a multi-view depth-camera renderer for it, and the
episode generator used to build datasets.

The rim is a closed loop of M nodes joined by ring springs (i, i+1) and
2-hop bracing springs (i, i+2); the bracing resists kinks so different
handle separations produce distinct oval equilibria. Handles pin two
contiguous arcs rigidly to their poses. There is no gravity: equilibria
minimize elastic energy, so the rest shape is exactly the rest ring.

A planar loop of pure distance springs has first-order out-of-plane flexes
(chord lengths change only at second order in the displacement), so its
equilibria are degenerate. Each node therefore also feels a weak tether
toward a reference shape carried along by the two handle poses (a blend of
each pose applied to the node's rest offset). The tether vanishes at rest,
moves rigidly with the grips, and makes the equilibrium unique.
"""

import json
import hashlib
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize

from .errors import ConvergenceError
from .pointcloud import ColoredPointCloud, RigidTransform

__all__ = [
    "HANDLE_RADIUS", "BimanualAction", "RimModel", "Episode", "TargetSpec",
    "make_rim", "spring_energy", "residual_force", "settle", "step",
    "true_particles", "handle_positions", "default_cameras", "render_views",
    "make_target", "TARGET_SEPARATIONS", "generate_dataset", "msm_model",
    "save_episode", "load_episode",
]

# grippers are modeled as balls of this radius; it also scales the rotation
# component when action vectors are measured in meters
HANDLE_RADIUS = 0.05

RIM_HUE = 30.0      # rim tube color (orange band)
GRIPPER_HUE = 215.0
TABLE_HUE = 100.0

TARGET_SEPARATIONS = {"LO": 0.35, "RO": 0.24, "SO": 0.15}


@dataclass(frozen=True)
class BimanualAction:
    """Per-arm deltas (dx, dy, dz, dr_z); dr_z in radians about the handle."""

    arm0: np.ndarray
    arm1: np.ndarray

    def __post_init__(self):
        for name in ("arm0", "arm1"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(4)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, v)

    def pair_vector(self, handle_radius=HANDLE_RADIUS):
        """8-vector with rotation scaled into meters for a shared norm."""
        s = np.array([1.0, 1.0, 1.0, handle_radius])
        return np.concatenate([self.arm0 * s, self.arm1 * s])

    def norm(self, handle_radius=HANDLE_RADIUS):
        return float(np.linalg.norm(self.pair_vector(handle_radius)))

    @classmethod
    def from_pair_vector(cls, v, handle_radius=HANDLE_RADIUS):
        v = np.asarray(v, dtype=float).reshape(8)
        s = np.array([1.0, 1.0, 1.0, 1.0 / handle_radius])
        return cls(v[:4] * s, v[4:] * s)

    @classmethod
    def zero(cls):
        return cls(np.zeros(4), np.zeros(4))


@dataclass(frozen=True)
class RimModel:
    """Rim state: rest geometry, spring stiffnesses, handle binding, and the
    current equilibrium positions."""

    rest_positions: np.ndarray      # (M, 3)
    k_ring: float
    k_brace: float
    k_tether: float
    anchors0: np.ndarray            # node indices pinned to handle 0
    anchors1: np.ndarray
    local0: np.ndarray              # anchor coords in handle-0 frame
    local1: np.ndarray
    rest_local0: np.ndarray         # all rest nodes in handle-0 frame
    rest_local1: np.ndarray
    blend: np.ndarray               # (M,) tether weight toward handle 0
    pose0: RigidTransform
    pose1: RigidTransform
    positions: np.ndarray           # (M, 3) current equilibrium

    def __post_init__(self):
        if self.k_ring <= 0 or self.k_brace <= 0 or self.k_tether < 0:
            raise ValueError("stiffness must be positive")
        if np.intersect1d(self.anchors0, self.anchors1).size:
            raise ValueError("anchor sets must be disjoint")

    @property
    def m(self):
        return len(self.rest_positions)


def _springs(model):
    """(ia, ib, rest_length, stiffness) arrays for ring + bracing springs."""
    m = model.m
    idx = np.arange(m)
    ia = np.concatenate([idx, idx])
    ib = np.concatenate([(idx + 1) % m, (idx + 2) % m])
    rest = model.rest_positions
    l0 = np.sqrt(((rest[ia] - rest[ib]) ** 2).sum(axis=1))
    k = np.concatenate([np.full(m, model.k_ring), np.full(m, model.k_brace)])
    return ia, ib, l0, k


def make_rim(m=128, radius=0.12, k_ring=50.0, k_brace=25.0, k_tether=2.0,
             anchor_arc=9):
    """Rest ring in the xy-plane, anchors centered at angle 0 and pi."""
    if m < 8 or anchor_arc < 1 or 2 * anchor_arc >= m:
        raise ValueError("bad rim dimensions")
    ang = 2 * np.pi * np.arange(m) / m
    rest = np.column_stack([radius * np.cos(ang), radius * np.sin(ang),
                            np.zeros(m)])
    half = anchor_arc // 2
    anchors0 = np.sort(np.mod(np.arange(-half, anchor_arc - half), m))
    anchors1 = np.sort(np.mod(m // 2 + np.arange(-half, anchor_arc - half), m))
    c0 = rest[anchors0].mean(axis=0)
    c1 = rest[anchors1].mean(axis=0)
    model = RimModel(
        rest_positions=rest,
        k_ring=float(k_ring),
        k_brace=float(k_brace),
        k_tether=float(k_tether),
        anchors0=anchors0,
        anchors1=anchors1,
        local0=rest[anchors0] - c0,
        local1=rest[anchors1] - c1,
        rest_local0=rest - c0,
        rest_local1=rest - c1,
        blend=0.5 * (1.0 + np.cos(ang)),
        pose0=RigidTransform(np.eye(3), c0),
        pose1=RigidTransform(np.eye(3), c1),
        positions=rest.copy(),
    )
    return model


def _tether_reference(model):
    """Per-node rest offsets carried along by the two handle poses."""
    w = model.blend[:, None]
    return (w * model.pose0.apply(model.rest_local0)
            + (1.0 - w) * model.pose1.apply(model.rest_local1))


def _anchored_positions(model, positions=None):
    pos = (model.positions if positions is None else positions).copy()
    pos[model.anchors0] = model.pose0.apply(model.local0)
    pos[model.anchors1] = model.pose1.apply(model.local1)
    return pos


def spring_energy(model, positions=None):
    """Total elastic energy: springs plus the handle-shape tether."""
    pos = model.positions if positions is None else positions
    ia, ib, l0, k = _springs(model)
    length = np.sqrt(((pos[ia] - pos[ib]) ** 2).sum(axis=1))
    e = 0.5 * (k * (length - l0) ** 2).sum()
    dev = pos - _tether_reference(model)
    return float(e + 0.5 * model.k_tether * (dev**2).sum())


def _scatter_rows(out, idx, rows, sign=1.0):
    """out[idx] += sign * rows, one bincount per column (np.add.at is slow)."""
    m = len(out)
    for c in range(out.shape[1]):
        out[:, c] += sign * np.bincount(idx, rows[:, c], minlength=m)
    return out


def _forces(model, pos):
    ia, ib, l0, k = _springs(model)
    d = pos[ia] - pos[ib]
    length = np.sqrt((d**2).sum(axis=1))
    coef = (k * (length - l0) / np.maximum(length, 1e-12))[:, None] * d
    g = np.zeros_like(pos)
    _scatter_rows(g, ia, coef)
    _scatter_rows(g, ib, coef, sign=-1.0)
    g += model.k_tether * (pos - _tether_reference(model))
    return g  # gradient of energy; force = -g


def residual_force(model, positions=None):
    """Largest force magnitude on any free (non-anchored) node, in newtons."""
    pos = model.positions if positions is None else positions
    g = _forces(model, pos)
    free = np.setdiff1d(np.arange(model.m),
                        np.concatenate([model.anchors0, model.anchors1]))
    return float(np.sqrt((g[free] ** 2).sum(axis=1)).max())


def settle(model, max_iter=100_000, tol=1e-6):
    """Equilibrium positions with anchors pinned to the handle poses.

    Minimizes total spring energy from the current positions (warm start);
    deterministic. Raises ConvergenceError if the residual force on every
    free node cannot be brought under tol newtons within the iteration
    budget. The default tol gives exact world stepping; planners may pass a
    looser tol for cheap preview rollouts.
    """
    pos0 = _anchored_positions(model)
    anchored = np.concatenate([model.anchors0, model.anchors1])
    free = np.setdiff1d(np.arange(model.m), anchored)
    template = pos0.copy()
    ia, ib, l0, k = _springs(model)
    ref = _tether_reference(model)
    kt = model.k_tether

    def fun(x):
        pos = template.copy()
        pos[free] = x.reshape(-1, 3)
        d = pos[ia] - pos[ib]
        length = np.sqrt((d**2).sum(axis=1))
        dev = pos - ref
        e = 0.5 * (k * (length - l0) ** 2).sum() + 0.5 * kt * (dev**2).sum()
        coef = (k * (length - l0) / np.maximum(length, 1e-12))[:, None] * d
        g = np.zeros_like(pos)
        _scatter_rows(g, ia, coef)
        _scatter_rows(g, ib, coef, sign=-1.0)
        g += kt * dev
        return e, g[free].ravel()

    if residual_force(model, pos0) < tol:
        return pos0  # already settled; keeps settle bit-idempotent

    x = pos0[free].ravel()
    spent = 0
    # loose tolerances pass the residual gate long before the inner
    # optimizer's own stopping rules fire, so check in short chunks
    chunk = 48 if tol >= 1e-4 else 20_000
    while spent < max_iter:
        budget = min(chunk, max_iter - spent)
        res = minimize(fun, x, jac=True, method="L-BFGS-B",
                       options={"maxiter": budget, "maxcor": 20,
                                "ftol": 1e-18, "gtol": tol / 20.0})
        x = res.x
        spent += int(res.nit) + 1
        pos = template.copy()
        pos[free] = x.reshape(-1, 3)
        if residual_force(model, pos) < tol:
            return pos
        if res.nit < budget:
            # the inner solver stalled below its own tolerances; one retry
            # with a perturbation-free restart cannot make progress
            break
    raise ConvergenceError(
        "settle did not reach equilibrium", residual=residual_force(model, pos)
    )


def _rotz(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _moved_pose(pose, arm):
    """Translate and yaw a handle pose about its own centroid."""
    rot = _rotz(arm[3]) @ pose.rotation
    return RigidTransform(rot, pose.translation + arm[:3])


def step(model, action, eps=0.02):
    """Apply a bimanual action (move handles, re-settle). Pure."""
    if action.norm() > eps + 1e-12:
        raise ValueError(
            f"action norm {action.norm():.4f} exceeds bound {eps}"
        )
    moved = replace(
        model,
        pose0=_moved_pose(model.pose0, action.arm0),
        pose1=_moved_pose(model.pose1, action.arm1),
    )
    return replace(moved, positions=settle(moved))


def true_particles(model, n=64):
    """Ground-truth particle set: every (M/n)-th rim node, index-tracked."""
    if model.m % n:
        raise ValueError(f"particle count {n} must divide node count {model.m}")
    return model.positions[:: model.m // n].copy()


def handle_positions(model):
    return np.vstack([model.pose0.translation, model.pose1.translation])


# ---------------------------------------------------------------------------
# rendering


def default_cameras(radius=0.55, height=0.45):
    """Four cameras on a circle, all aimed at the origin."""
    cams = []
    for az in (0.0, np.pi / 2, np.pi, 3 * np.pi / 2):
        eye = np.array([radius * np.cos(az), radius * np.sin(az), height])
        f = -eye / np.linalg.norm(eye)
        r = np.cross(f, np.array([0.0, 0.0, 1.0]))
        r = r / np.linalg.norm(r)
        u = np.cross(f, r)
        cams.append(RigidTransform(np.column_stack([r, u, f]), eye))
    return cams


def _tube_points(model, n_points, r_tube, rng):
    """Random points on a swept tube around the current rim polyline."""
    pos = model.positions
    m = model.m
    u = rng.uniform(0, m, n_points)
    phi = rng.uniform(0, 2 * np.pi, n_points)
    i0 = np.floor(u).astype(int) % m
    frac = (u - np.floor(u))[:, None]
    nxt = (i0 + 1) % m
    c = (1 - frac) * pos[i0] + frac * pos[nxt]
    t = pos[nxt] - pos[i0]
    t = t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-12)
    centroid = pos.mean(axis=0)
    rv = c - centroid
    rv = rv - (rv * t).sum(axis=1, keepdims=True) * t
    bad = np.linalg.norm(rv, axis=1) < 1e-9
    rv[bad] = np.cross(t[bad], np.array([0.0, 0.0, 1.0]))
    n1 = rv / np.maximum(np.linalg.norm(rv, axis=1, keepdims=True), 1e-12)
    n2 = np.cross(t, n1)
    return c + r_tube * (np.cos(phi)[:, None] * n1 + np.sin(phi)[:, None] * n2)


def _ball_points(center, radius, n_points, rng):
    v = rng.normal(size=(n_points, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return center + radius * v


def _hidden_point_removal(points, eye):
    """Spherical-flip visibility: keep points on the hull of the flipped set."""
    from scipy.spatial import ConvexHull

    rel = points - eye
    dist = np.linalg.norm(rel, axis=1)
    r = dist.max() * 10.0
    flipped = points + 2.0 * (r - dist)[:, None] * rel / dist[:, None]
    hull = ConvexHull(np.vstack([flipped, eye]))
    visible = np.array(sorted(set(hull.vertices) - {len(points)}), dtype=int)
    return visible[visible < len(points)]


def render_views(model, cameras=None, noise_sigma=0.002, occlusion=0.4,
                 seed=0, n_surface=4000, r_tube=0.008, table=True):
    """Four synthetic camera views of the scene, in camera frames.

    The rim tube, gripper balls, and (optionally) a table plane carry
    distinct colors so an HSV band isolates the rim. Each view loses an
    azimuthal sector of the scene (width occlusion * 360 degrees, staggered
    90 degrees per camera) plus whatever hidden-point removal culls, then
    gets Gaussian position noise. Deterministic per seed.
    """
    if cameras is None:
        cameras = default_cameras()
    rng = np.random.default_rng(seed)

    rim = _tube_points(model, n_surface, r_tube, rng)
    hp = handle_positions(model)
    grip = np.vstack([
        _ball_points(hp[0] + [0, 0, HANDLE_RADIUS], 0.02, 250, rng),
        _ball_points(hp[1] + [0, 0, HANDLE_RADIUS], 0.02, 250, rng),
    ])
    pieces = [rim, grip]
    hues = [np.full(len(rim), RIM_HUE), np.full(len(grip), GRIPPER_HUE)]
    sats = [np.full(len(rim), 0.9), np.full(len(grip), 0.85)]
    vals = [np.full(len(rim), 0.9), np.full(len(grip), 0.7)]
    if table:
        ang = rng.uniform(0, 2 * np.pi, 800)
        rad = 0.45 * np.sqrt(rng.uniform(0, 1, 800))
        tab = np.column_stack([rad * np.cos(ang), rad * np.sin(ang),
                               np.full(800, -0.15)])
        pieces.append(tab)
        hues.append(np.full(len(tab), TABLE_HUE))
        sats.append(np.full(len(tab), 0.05))
        vals.append(np.full(len(tab), 0.45))
    world = np.vstack(pieces)
    hsv = np.column_stack([np.concatenate(hues), np.concatenate(sats),
                           np.concatenate(vals)])

    centroid = model.positions.mean(axis=0)
    az_pt = np.arctan2(world[:, 1] - centroid[1], world[:, 0] - centroid[0])

    clouds = []
    for k, cam in enumerate(cameras):
        keep = np.ones(len(world), dtype=bool)
        if occlusion > 0:
            center = k * np.pi / 2
            halfwidth = occlusion * np.pi
            delta = np.angle(np.exp(1j * (az_pt - center)))
            keep &= np.abs(delta) > halfwidth
        idx = np.nonzero(keep)[0]
        if len(idx) >= 8:
            vis = _hidden_point_removal(world[idx], cam.translation)
            idx = idx[vis]
        pts = world[idx]
        if noise_sigma > 0:
            pts = pts + rng.normal(scale=noise_sigma, size=pts.shape)
        cam_pts = cam.inverse().apply(pts)
        clouds.append(ColoredPointCloud(cam_pts, hsv[idx], f"cam{k}"))
    return clouds


# ---------------------------------------------------------------------------
# targets, episodes, baseline


def make_target(shape, n=64, m=128, radius=0.12, offset=(0.0, 0.0, 0.0),
                substeps=4):
    """Equilibrium particle set for a named oval at a given handle
    separation, optionally shifted rigidly. shape: LO | RO | SO."""
    if shape not in TARGET_SEPARATIONS:
        raise ValueError(f"unknown target shape {shape!r}")
    model = settle_to_separation(make_rim(m=m, radius=radius),
                                 TARGET_SEPARATIONS[shape], substeps)
    return true_particles(model, n) + np.asarray(offset, dtype=float)


def settle_to_separation(model, separation, substeps=4):
    """Move the handles to +/- separation/2 along x in a few settles."""
    c0 = model.pose0.translation
    c1 = model.pose1.translation
    t0 = np.array([separation / 2.0, 0.0, 0.0])
    t1 = np.array([-separation / 2.0, 0.0, 0.0])
    for s in range(1, substeps + 1):
        a = s / substeps
        moved = replace(
            model,
            pose0=RigidTransform(model.pose0.rotation, (1 - a) * c0 + a * t0),
            pose1=RigidTransform(model.pose1.rotation, (1 - a) * c1 + a * t1),
        )
        model = replace(moved, positions=settle(moved))
    return model


def msm_model(model, stiffness_scale=1.5):
    """Deliberately mismatched copy for the analytic baseline: both spring
    families are scaled while the tether is not, shifting the spring:tether
    balance. (Scaling every term uniformly would leave equilibria unchanged.)"""
    return replace(model, k_ring=model.k_ring * stiffness_scale,
                   k_brace=model.k_brace * stiffness_scale)


@dataclass(frozen=True)
class TargetSpec:
    """Either a named oval or an explicit particle set."""

    shape: str = ""
    particles: np.ndarray | None = None

    def resolve(self, n=64):
        if self.particles is not None:
            pts = np.asarray(self.particles, dtype=float).reshape(-1, 3)
            if len(pts) != n:
                raise ValueError(f"explicit target must have {n} particles")
            return pts
        return make_target(self.shape, n=n)


@dataclass
class Episode:
    """Initial state plus one record per executed frame."""

    initial_particles: np.ndarray
    initial_handles: np.ndarray            # (2, 3)
    particles: np.ndarray                  # (F, n, 3) state after each frame
    handles: np.ndarray                    # (F, 2, 3)
    actions: np.ndarray                    # (F, 8) raw per-arm vectors
    meta: dict

    def __len__(self):
        return len(self.particles)

    def states(self):
        """(F+1, n, 3) including the initial state."""
        return np.concatenate([self.initial_particles[None], self.particles])

    def handle_track(self):
        return np.concatenate([self.initial_handles[None], self.handles])


def _config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _sample_macro_action(rng, eps, prev=None, rho=0.0):
    v = rng.normal(size=8)
    v = v / np.linalg.norm(v)
    mag = eps * rng.uniform(0, 1) ** (1.0 / 8.0)  # uniform in the 8-ball
    fresh = v * mag
    if prev is None or rho <= 0.0:
        return BimanualAction.from_pair_vector(fresh)
    # AR(1) continuity: successive macros stay correlated, like a smooth
    # controller; variance-preserving mix keeps the stationary scale at eps
    w = rho * prev + np.sqrt(1.0 - rho * rho) * fresh
    n = np.linalg.norm(w)
    if n > eps:
        w *= eps / n
    return BimanualAction.from_pair_vector(w)


def _macro_feasible(model, action, repeat, d_lb, d_ub):
    """Pose-only preview: handle separation must stay within bounds."""
    p0, p1 = model.pose0, model.pose1
    for _ in range(repeat):
        p0 = _moved_pose(p0, action.arm0)
        p1 = _moved_pose(p1, action.arm1)
        sep = np.linalg.norm(p0.translation - p1.translation)
        if not (d_lb <= sep <= d_ub):
            return False
    return True


def generate_dataset(n_episodes, seed=0, n_macro=20, repeat=6,
                     n_particles=64, eps=0.02, d_lb=0.10, d_ub=0.60,
                     m=128, radius=0.12, max_draws_per_macro=1000,
                     macro_rho=0.0):
    """Random-policy episodes from the rest ring. Deterministic per seed."""
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    if not 0.0 <= macro_rho < 1.0:
        raise ValueError("macro_rho must be in [0, 1)")
    cfg = {
        "n_episodes": n_episodes, "seed": seed, "n_macro": n_macro,
        "repeat": repeat, "n_particles": n_particles, "eps": eps,
        "d_lb": d_lb, "d_ub": d_ub, "m": m, "radius": radius,
        "macro_rho": macro_rho,
    }
    episodes = []
    for ep in range(n_episodes):
        rng = np.random.default_rng((seed, ep))
        model = make_rim(m=m, radius=radius)
        frames_p, frames_h, frames_a = [], [], []
        init_p = true_particles(model, n_particles)
        init_h = handle_positions(model)
        prev_vec = None
        for _ in range(n_macro):
            action = None
            for draw in range(max_draws_per_macro):
                # correlated draws may be boxed in near the separation
                # bounds; second half of the budget falls back to fresh ones
                rho = macro_rho if draw < max_draws_per_macro // 2 else 0.0
                cand = _sample_macro_action(rng, eps, prev_vec, rho)
                if _macro_feasible(model, cand, repeat, d_lb, d_ub):
                    action = cand
                    break
            if action is None:
                # start pose always admits some action; bail loudly if not
                raise RuntimeError("no feasible macro action found")
            prev_vec = action.pair_vector(handle_radius=1.0)
            for _ in range(repeat):
                model = step(model, action, eps=eps)
                frames_p.append(true_particles(model, n_particles))
                frames_h.append(handle_positions(model))
                frames_a.append(action.pair_vector(handle_radius=1.0))
        meta = {"episode": ep, "config": cfg, "config_hash": _config_hash(cfg)}
        episodes.append(Episode(
            initial_particles=init_p,
            initial_handles=init_h,
            particles=np.stack(frames_p),
            handles=np.stack(frames_h),
            actions=np.stack(frames_a),
            meta=meta,
        ))
    return episodes


def split_episodes(episodes, fractions=(0.70, 0.15, 0.15)):
    """Deterministic 70/15/15 split by episode order."""
    n = len(episodes)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    train = episodes[:n_train]
    val = episodes[n_train:n_train + n_val]
    test = episodes[n_train + n_val:]
    return train, val, test


def save_episode(path, episode):
    import csv
    import os

    os.makedirs(path, exist_ok=True)
    states = episode.states()
    for t, frame in enumerate(states):
        with open(os.path.join(path, f"frame_{t:04d}.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["x", "y", "z"])
            for row in frame:
                w.writerow([f"{v:.9e}" for v in row])
    handles = episode.handle_track()
    record = {
        "actions": [[float(v) for v in a] for a in episode.actions],
        "handles": [[[float(v) for v in h] for h in hh] for hh in handles],
    }
    with open(os.path.join(path, "actions.json"), "w") as f:
        json.dump(record, f, indent=1, sort_keys=True)
    with open(os.path.join(path, "meta.json"), "w") as f:
        json.dump(episode.meta, f, indent=1, sort_keys=True)


def load_episode(path):
    import csv
    import os

    with open(os.path.join(path, "actions.json")) as f:
        record = json.load(f)
    with open(os.path.join(path, "meta.json")) as f:
        meta = json.load(f)
    actions = np.array(record["actions"], dtype=float)
    handles = np.array(record["handles"], dtype=float)
    frames = []
    t = 0
    while os.path.exists(os.path.join(path, f"frame_{t:04d}.csv")):
        with open(os.path.join(path, f"frame_{t:04d}.csv")) as f:
            rows = list(csv.reader(f))[1:]
        frames.append(np.array([[float(v) for v in r] for r in rows]))
        t += 1
    states = np.stack(frames)
    if len(states) != len(actions) + 1:
        raise ValueError(f"{path}: frame/action count mismatch")
    return Episode(
        initial_particles=states[0],
        initial_handles=handles[0],
        particles=states[1:],
        handles=handles[1:],
        actions=actions,
        meta=meta,
    )
