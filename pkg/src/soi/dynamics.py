"""Learned particle-graph dynamics.

Particles sampled from the rim are connected into a distance-threshold graph
and advanced by an encode-propagate-decode message-passing network predicting
per-node displacements. Gradients for training and for planner refinement come
from the reverse-mode tape in soi.nn.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import nn
from .errors import ConvergenceError
from .metrics import HybridWeights, cd_cm, hybrid, hybrid_grad
from .simworld import HANDLE_RADIUS, BimanualAction, split_episodes

EDGE_RIM_RIM = 0
EDGE_HANDLE_RIM = 1
_ACTION_DIM = 4    # per-arm (dx, dy, dz, radius-scaled dr_z)
_EDGE_FEAT = 6     # relative displacement, distance, type one-hot
_MAGIC = b"SOI1"


def label_handles(particles, handle_positions, r=HANDLE_RADIUS):
    """Arm index per particle: 0/1 strictly inside the open ball of radius r
    around that arm's handle (nearest handle on overlap), -1 outside both."""
    pts = np.asarray(particles, dtype=float)
    hp = np.asarray(handle_positions, dtype=float).reshape(2, 3)
    if r <= 0:
        raise ValueError("r must be positive")
    d = np.linalg.norm(pts[:, None, :] - hp[None], axis=2)
    arm = d.argmin(axis=1)
    inside = d[np.arange(len(pts)), arm] < r
    return np.where(inside, arm, -1).astype(np.int8)


@dataclass(frozen=True)
class ParticleGraph:
    """Current positions, h previous frames, handle labels, typed edges."""

    positions: np.ndarray    # (N, 3)
    history: np.ndarray      # (h, N, 3) previous frames, oldest first
    labels: np.ndarray       # (N,) arm index or -1
    edges: np.ndarray        # (E, 2) int with m < n; each undirected pair once
    edge_types: np.ndarray   # (E,)

    def __post_init__(self):
        n = len(self.positions)
        e = self.edges
        if len(e) and (e[:, 0] >= e[:, 1]).any():
            raise ValueError("edges must satisfy m < n")
        if len(e) and e.max() >= n:
            raise ValueError("edge index out of range")
        if self.history.ndim != 3 or self.history.shape[1:] != (n, 3):
            raise ValueError("history must be (h, N, 3)")


def build_graph(particles, labels, d=0.04, history=None):
    """Edges = all pairs strictly within d; HandleRim type iff exactly one
    endpoint is a handle particle. Isolated vertices are fine."""
    pts = np.asarray(particles, dtype=float)
    if d <= 0:
        raise ValueError("d must be positive")
    labels = np.asarray(labels).astype(np.int8)
    iu, ju = np.triu_indices(len(pts), k=1)
    keep = ((pts[iu] - pts[ju]) ** 2).sum(axis=1) < d * d
    m, n = iu[keep], ju[keep]
    handle = labels >= 0
    types = np.where(handle[m] ^ handle[n], EDGE_HANDLE_RIM, EDGE_RIM_RIM)
    if history is None:
        history = np.empty((0, len(pts), 3))
    return ParticleGraph(pts, np.asarray(history, dtype=float), labels,
                         np.column_stack([m, n]).astype(np.intp),
                         types.astype(np.int8))


@dataclass
class DynamicsModel:
    """Five MLPs: node/edge encoders, a shared propagator applied for
    `rounds` message-passing sweeps, and edge-then-node decoders.

    The decoded displacement is multiplied by `delta_scale` so a freshly
    initialized network moves particles by millimeters, matching the
    per-frame motion scale, instead of by whole latent units."""

    width: int
    h: int
    rounds: int
    d: float
    r_handle: float
    delta_scale: float
    phi_p: nn.Mlp
    phi_e: nn.Mlp
    prop: nn.Mlp
    psi_e: nn.Mlp
    psi_p: nn.Mlp

    @property
    def node_feat_dim(self):
        return 3 * (self.h + 1) + 2 + _ACTION_DIM

    @property
    def mlps(self):
        return {"phi_p": self.phi_p, "phi_e": self.phi_e, "prop": self.prop,
                "psi_e": self.psi_e, "psi_p": self.psi_p}

    @property
    def params(self):
        return [p for mlp in self.mlps.values() for p in mlp.params]


def make_model(width=300, h=2, rounds=3, d=0.04, r_handle=HANDLE_RADIUS,
               seed=0, delta_scale=0.005):
    if width < 1 or h < 0 or rounds < 1 or d <= 0 or r_handle <= 0 \
            or delta_scale <= 0:
        raise ValueError("bad model hyperparameters")
    rng = np.random.default_rng(seed)
    w = width
    nf = 3 * (h + 1) + 2 + _ACTION_DIM
    return DynamicsModel(
        width=width, h=h, rounds=rounds, d=d, r_handle=r_handle,
        delta_scale=delta_scale,
        phi_p=nn.Mlp([nf, w, w, w], rng),
        phi_e=nn.Mlp([_EDGE_FEAT, w, w, w], rng),
        prop=nn.Mlp([3 * w, w, w, w], rng),
        psi_e=nn.Mlp([3 * w, w, w, w], rng),
        psi_p=nn.Mlp([2 * w, w, w, 3], rng),
    )


def _directed(graph):
    e = graph.edges
    senders = np.concatenate([e[:, 0], e[:, 1]])
    receivers = np.concatenate([e[:, 1], e[:, 0]])
    types = np.concatenate([graph.edge_types, graph.edge_types])
    return senders, receivers, types


def _action8(model, action):
    if isinstance(action, BimanualAction):
        return action.pair_vector(model.r_handle)
    return np.asarray(action, dtype=float).reshape(8)


def scale_raw_action(raw8, r_handle=HANDLE_RADIUS):
    """Raw per-arm (dx, dy, dz, dr_z) pairs -> the metric 8-vector the model
    consumes (rotation scaled into meters)."""
    s = np.array([1.0, 1.0, 1.0, r_handle] * 2)
    return np.asarray(raw8, dtype=float) * s


def _features_np(model, graph, act8):
    pts = graph.positions
    n = len(pts)
    if len(graph.history) != model.h:
        raise ValueError(f"graph history has {len(graph.history)} frames, "
                         f"model needs {model.h}")
    c = pts.mean(axis=0)
    frames = [f - c for f in graph.history]
    frames.append(pts - c)
    onehot = np.zeros((n, 2))
    onehot[:, 0] = graph.labels < 0
    onehot[:, 1] = graph.labels >= 0
    act = np.zeros((n, _ACTION_DIM))
    act[graph.labels == 0] = act8[:4]
    act[graph.labels == 1] = act8[4:]
    node = np.concatenate(frames + [onehot, act], axis=1)
    s, r, types = _directed(graph)
    rel = pts[s] - pts[r]
    dist = np.sqrt((rel**2).sum(axis=1, keepdims=True))
    tone = np.zeros((len(s), 2))
    tone[np.arange(len(s)), types] = 1.0
    edge = np.concatenate([rel, dist, tone], axis=1)
    return node, edge, s, r


def _propagate(model, node_x, edge_x, senders, receivers):
    """Tape-mode core: encode, message rounds, decode edges then nodes."""
    if node_x.shape[1] != model.phi_p.layers[0].w.shape[0]:
        raise ValueError(f"node features of size {node_x.shape[1]} do not "
                         f"match the model input "
                         f"({model.phi_p.layers[0].w.shape[0]})")
    v = model.phi_p(node_x)
    e = model.phi_e(edge_x)
    n = len(node_x.value)
    ne = len(senders)
    idx = np.arange(ne)
    deg = np.bincount(receivers, minlength=n).astype(np.float64)
    inv = 1.0 / np.maximum(deg, 1.0)
    # round aggregation is the mean of incoming [v_sender || e]; the mean
    # distributes over the concatenation, so both halves pool independently
    # (averaging keeps latent magnitude independent of vertex degree)
    adj = nn.FixedMap(receivers, senders, n, n, inv[receivers])
    pool_mean = nn.FixedMap(receivers, idx, n, ne, inv[receivers])
    pool_sum = nn.FixedMap(receivers, idx, n, ne)
    pick_s = nn.FixedMap(idx, senders, ne, n)
    pick_r = nn.FixedMap(idx, receivers, ne, n)
    agg_e = nn.spmm(pool_mean, e)
    for _ in range(model.rounds):
        agg = nn.concat([nn.spmm(adj, v), agg_e])
        # residual update keeps the unrolled rounds well-conditioned
        v = nn.add(v, model.prop(nn.concat([v, agg])))
    e_hat = model.psi_e(nn.concat([nn.spmm(pick_s, v),
                                   nn.spmm(pick_r, v), e]))
    # decoded edge latents are summed at their recipient, then scaled
    delta = model.psi_p(nn.concat([v, nn.spmm(pool_sum, e_hat)]))
    return nn.mul(delta, nn.Tensor(model.delta_scale))


def _propagate_np(model, node, edge, senders, receivers):
    """Gradient-free mirror of _propagate on plain arrays; keep in lockstep.

    Sparse picks are replaced by row gathers (each pick row holds a single
    1.0, so the products are identical) and the MLPs run without the tape,
    which is what makes planner rollouts affordable."""
    if node.shape[1] != model.phi_p.layers[0].w.shape[0]:
        raise ValueError(f"node features of size {node.shape[1]} do not "
                         f"match the model input "
                         f"({model.phi_p.layers[0].w.shape[0]})")
    v = model.phi_p.infer(node)
    e = model.phi_e.infer(edge)
    n = len(node)
    ne = len(senders)
    idx = np.arange(ne)
    deg = np.bincount(receivers, minlength=n).astype(np.float64)
    inv = 1.0 / np.maximum(deg, 1.0)
    w = inv[receivers]
    adj = sparse.csr_matrix((w, (receivers, senders)), shape=(n, n))
    pool_mean = sparse.csr_matrix((w, (receivers, idx)), shape=(n, ne))
    pool_sum = sparse.csr_matrix((np.ones(ne), (receivers, idx)),
                                 shape=(n, ne))
    agg_e = pool_mean @ e
    for _ in range(model.rounds):
        agg = np.concatenate([adj @ v, agg_e], axis=1)
        v = v + model.prop.infer(np.concatenate([v, agg], axis=1))
    e_hat = model.psi_e.infer(
        np.concatenate([v[senders], v[receivers], e], axis=1))
    delta = model.psi_p.infer(np.concatenate([v, pool_sum @ e_hat], axis=1))
    delta *= model.delta_scale
    return delta


def forward(model, graph, action):
    """One-step prediction: current positions + decoded displacement."""
    act8 = _action8(model, action)
    node, edge, s, r = _features_np(model, graph, act8)
    return graph.positions + _propagate_np(model, node, edge, s, r)


def _advance(model, graph, new_positions):
    """Slide the history window and rebuild edges at the new positions.
    Labels are material: grasped particles stay grasped."""
    if model.h > 0:
        hist = np.concatenate([graph.history[1:], graph.positions[None]])
    else:
        hist = graph.history
    return build_graph(new_positions, graph.labels, model.d, hist)


def rollout(model, graph, actions):
    """Autoregressive forward; returns (T+1, N, 3) with the input at row 0."""
    states = [graph.positions.copy()]
    g = graph
    for action in actions:
        pred = forward(model, g, action)
        g = _advance(model, g, pred)
        states.append(pred)
    return np.stack(states)


def _node_block(model, pos, hist, labels, acts):
    """Node features for B same-size graphs, stacked block-diagonally.
    pos (B,N,3), hist (B,h,N,3), labels (B,N), acts (B,8) -> (B*N, nf)."""
    b, n = pos.shape[:2]
    if hist.shape[1] != model.h:
        raise ValueError(f"graph history has {hist.shape[1]} frames, "
                         f"model needs {model.h}")
    c = pos.mean(axis=1, keepdims=True)
    parts = [hist[:, j] - c for j in range(model.h)]
    parts.append(pos - c)
    onehot = np.zeros((b, n, 2))
    onehot[:, :, 0] = labels < 0
    onehot[:, :, 1] = labels >= 0
    act = np.where((labels == 0)[:, :, None], acts[:, None, 0:4], 0.0)
    act += np.where((labels == 1)[:, :, None], acts[:, None, 4:8], 0.0)
    return np.concatenate(parts + [onehot, act], axis=2).reshape(b * n, -1)


def _edge_block(pos_flat, senders, receivers, types):
    """Directed edge features from already-offset index arrays."""
    rel = pos_flat[senders] - pos_flat[receivers]
    dist = np.sqrt((rel ** 2).sum(axis=1, keepdims=True))
    tone = np.zeros((len(senders), 2))
    tone[np.arange(len(senders)), types] = 1.0
    return np.concatenate([rel, dist, tone], axis=1)


def _directed_given(graphs, n):
    """Block-diagonal directed edges honoring each graph's stored edge set,
    in the same per-sample forward-then-reverse order as the single path."""
    snd, rcv, typ = [], [], []
    for i, g in enumerate(graphs):
        e, off = g.edges, i * n
        snd += [e[:, 0] + off, e[:, 1] + off]
        rcv += [e[:, 1] + off, e[:, 0] + off]
        typ += [g.edge_types, g.edge_types]
    return (np.concatenate(snd), np.concatenate(rcv), np.concatenate(typ))


def _directed_detect(pos, labels, d):
    """Same as build_graph + _directed per sample, fully vectorized.
    pos (B,N,3) -> offset senders/receivers/types, sample-major order."""
    b, n = pos.shape[:2]
    iu, ju = np.triu_indices(n, k=1)
    keep = ((pos[:, iu, :] - pos[:, ju, :]) ** 2).sum(axis=2) < d * d
    bi, pj = np.nonzero(keep)
    mi, ni = iu[pj], ju[pj]
    handle = labels >= 0
    types = np.where(handle[bi, mi] ^ handle[bi, ni],
                     EDGE_HANDLE_RIM, EDGE_RIM_RIM)
    # per-sample [forward block, reverse block], samples concatenated
    ecnt = np.bincount(bi, minlength=b)
    group = np.cumsum(ecnt) - ecnt
    within = np.arange(len(bi)) - np.repeat(group, ecnt)
    fwd = 2 * group[bi] + within
    rev = fwd + ecnt[bi]
    senders = np.empty(2 * len(bi), dtype=np.intp)
    receivers = np.empty_like(senders)
    off = bi * n
    senders[fwd] = off + mi
    senders[rev] = off + ni
    receivers[fwd] = off + ni
    receivers[rev] = off + mi
    typ = np.empty(2 * len(bi), dtype=types.dtype)
    typ[fwd] = types
    typ[rev] = types
    return senders, receivers, typ


def _batch_forward(model, samples):
    """One forward over a block-diagonal batch of (graph, act8, _) samples.
    Returns the prediction tensor and per-sample row slices."""
    graphs = [g for g, _, _ in samples]
    n = len(graphs[0].positions)
    if any(len(g.positions) != n for g in graphs):
        raise ValueError("batched graphs must share the particle count")
    pos = np.stack([g.positions for g in graphs])
    hist = np.stack([g.history for g in graphs])
    labels = np.stack([g.labels for g in graphs])
    acts = np.stack([np.asarray(a, dtype=float) for _, a, _ in samples])
    node = _node_block(model, pos, hist, labels, acts)
    s, r, typ = _directed_given(graphs, n)
    pos_flat = pos.reshape(-1, 3)
    edge = _edge_block(pos_flat, s, r, typ)
    delta = _propagate(model, nn.Tensor(node), nn.Tensor(edge), s, r)
    pred = nn.add(nn.Tensor(pos_flat), delta)
    slices = [slice(i * n, (i + 1) * n) for i in range(len(graphs))]
    return pred, slices


def _batch_forward_np(model, samples):
    """Gradient-free _batch_forward; returns (pred array, row slices)."""
    graphs = [g for g, _, _ in samples]
    n = len(graphs[0].positions)
    if any(len(g.positions) != n for g in graphs):
        raise ValueError("batched graphs must share the particle count")
    pos = np.stack([g.positions for g in graphs])
    hist = np.stack([g.history for g in graphs])
    labels = np.stack([g.labels for g in graphs])
    acts = np.stack([np.asarray(a, dtype=float) for _, a, _ in samples])
    node = _node_block(model, pos, hist, labels, acts)
    s, r, typ = _directed_given(graphs, n)
    pos_flat = pos.reshape(-1, 3)
    edge = _edge_block(pos_flat, s, r, typ)
    pred = pos_flat + _propagate_np(model, node, edge, s, r)
    slices = [slice(i * n, (i + 1) * n) for i in range(len(graphs))]
    return pred, slices


def rollout_batch(model, graphs, actions):
    """Roll B sequences at once; actions (B, T, 8). Returns (B, T+1, N, 3).

    Step 1 uses each graph's stored edges; later steps re-detect edges at
    the predicted positions, exactly as the single-sequence rollout does.
    """
    actions = np.asarray(actions, dtype=float)
    b, t = actions.shape[:2]
    n = len(graphs[0].positions)
    if any(len(g.positions) != n for g in graphs):
        raise ValueError("batched graphs must share the particle count")
    pos = np.stack([g.positions for g in graphs])
    hist = np.stack([g.history for g in graphs])
    labels = np.stack([g.labels for g in graphs])
    states = [pos.copy()]
    for k in range(t):
        node = _node_block(model, pos, hist, labels, actions[:, k])
        if k == 0:
            s, r, typ = _directed_given(graphs, n)
        else:
            s, r, typ = _directed_detect(pos, labels, model.d)
        pos_flat = pos.reshape(-1, 3)
        edge = _edge_block(pos_flat, s, r, typ)
        delta = _propagate_np(model, node, edge, s, r)
        pred = (pos_flat + delta).reshape(b, n, 3)
        if model.h > 0:
            hist = np.concatenate([hist[:, 1:], pos[:, None]], axis=1)
        pos = pred
        states.append(pred)
    return np.stack(states, axis=1)


def _features_t(model, pos_t, hist_t, graph, act8_t):
    """Tape-mode features: positions, history and action are Tensors, the
    graph topology and labels are held constant."""
    n = len(pos_t.value)
    c = nn.mean_rows(pos_t)
    frames = [nn.sub(f, c) for f in hist_t]
    frames.append(nn.sub(pos_t, c))
    onehot = np.zeros((n, 2))
    onehot[:, 0] = graph.labels < 0
    onehot[:, 1] = graph.labels >= 0
    sel0 = (graph.labels == 0).astype(float)[:, None]
    sel1 = (graph.labels == 1).astype(float)[:, None]
    act = nn.add(nn.mul(nn.Tensor(sel0), nn.gather(act8_t, np.arange(4))),
                 nn.mul(nn.Tensor(sel1), nn.gather(act8_t, np.arange(4, 8))))
    node = nn.concat(frames + [nn.Tensor(onehot), act])
    s, r, types = _directed(graph)
    rel = nn.sub(nn.gather(pos_t, s), nn.gather(pos_t, r))
    tone = np.zeros((len(s), 2))
    tone[np.arange(len(s)), types] = 1.0
    edge = nn.concat([rel, nn.norm_rows(rel), nn.Tensor(tone)])
    return node, edge, s, r


def forward_tape(model, graph, pos_t, hist_t, act8_t):
    node, edge, s, r = _features_t(model, pos_t, hist_t, graph, act8_t)
    return nn.add(pos_t, _propagate(model, node, edge, s, r))


def rollout_tape(model, graph, act_tensors):
    """Differentiable rollout. Edges are rebuilt from predicted values each
    step and treated as locally constant; gradients flow through positions,
    history and the action tensors. Returns one position Tensor per step."""
    pos = nn.Tensor(graph.positions)
    hist = [nn.Tensor(f) for f in graph.history]
    g = graph
    out = []
    for act_t in act_tensors:
        pred = forward_tape(model, g, pos, hist, act_t)
        out.append(pred)
        g = _advance(model, g, pred.value)
        if model.h > 0:
            hist = (hist + [pos])[-model.h:]
        pos = pred
    return out


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    batch: int = 32
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weights: HybridWeights = field(default_factory=HybridWeights)
    h: int = 2
    rounds: int = 3
    width: int = 300
    d: float = 0.04
    r_handle: float = HANDLE_RADIUS
    delta_scale: float = 0.005
    seed: int = 0
    max_steps: int | None = None   # optional cap on optimizer steps
    lr_final: float | None = None  # geometric per-step decay target

    def __post_init__(self):
        if min(self.epochs, self.batch, self.rounds, self.width) < 1:
            raise ValueError("config counts must be positive")
        if self.h < 0 or self.lr <= 0 or self.d <= 0 or self.r_handle <= 0:
            raise ValueError("config values must be positive")
        if self.lr_final is not None and not 0 < self.lr_final <= self.lr:
            raise ValueError("lr_final must be in (0, lr]")


def episode_samples(episode, h, d=0.04, r_handle=HANDLE_RADIUS):
    """(graph, metric action 8-vector, next positions) triples for every
    frame with enough history."""
    states = episode.states()
    handles = episode.handle_track()
    out = []
    for t in range(h, len(episode.actions)):
        labels = label_handles(states[t], handles[t], r_handle)
        g = build_graph(states[t], labels, d, states[t - h:t])
        out.append((g, scale_raw_action(episode.actions[t], r_handle),
                    states[t + 1]))
    return out


def _eval_loss(model, samples, weights, batch=64):
    losses = []
    for bi in range(0, len(samples), batch):
        chunk = samples[bi:bi + batch]
        pred, slices = _batch_forward_np(model, chunk)
        for (_, _, target), sl in zip(chunk, slices):
            losses.append(hybrid(pred[sl], target, weights))
    return float(np.mean(losses))


def train(episodes, cfg=TrainConfig()):
    """Train on a 70/15/15 episode split; returns (model, loss history).

    The returned model carries the weights with the lowest validation loss
    (final weights when the validation split is empty).
    """
    tr, va, _ = split_episodes(episodes)
    model = make_model(cfg.width, cfg.h, cfg.rounds, cfg.d, cfg.r_handle,
                       cfg.seed, cfg.delta_scale)
    train_samples = [s for ep in tr
                     for s in episode_samples(ep, cfg.h, cfg.d, cfg.r_handle)]
    val_samples = [s for ep in va
                   for s in episode_samples(ep, cfg.h, cfg.d, cfg.r_handle)]
    if not train_samples:
        raise ValueError("no training samples")
    opt = nn.Adam(model.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    rng = np.random.default_rng(cfg.seed)
    history = {"train": [], "val": []}
    best_loss, best_params = np.inf, None
    batches_per_epoch = -(-len(train_samples) // cfg.batch)
    total_steps = cfg.epochs * batches_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    steps = 0
    stop = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_samples))
        epoch_losses = []
        for bi in range(0, len(order), cfg.batch):
            if cfg.lr_final is not None and total_steps > 1:
                frac = steps / (total_steps - 1)
                opt.lr = cfg.lr * (cfg.lr_final / cfg.lr) ** frac
            batch = [train_samples[i] for i in order[bi:bi + cfg.batch]]
            pred, slices = _batch_forward(model, batch)
            seeds = np.zeros_like(pred.value)
            batch_losses = []
            for (_, _, target), sl in zip(batch, slices):
                p = pred.value[sl]
                batch_losses.append(hybrid(p, target, cfg.weights))
                seeds[sl] = hybrid_grad(p, target, cfg.weights) / len(batch)
            loss = float(np.mean(batch_losses))
            if not np.isfinite(loss):
                raise ConvergenceError(
                    f"training loss became non-finite at epoch {epoch + 1}, "
                    f"batch {bi // cfg.batch} (lr={cfg.lr}, "
                    f"batch={cfg.batch})", residual=loss)
            pred.backward(seeds)
            opt.step()
            epoch_losses.append(loss)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                stop = True
                break
        history["train"].append(float(np.mean(epoch_losses)))
        if val_samples:
            vloss = _eval_loss(model, val_samples, cfg.weights)
        else:
            vloss = history["train"][-1]
        history["val"].append(vloss)
        if vloss < best_loss:
            best_loss = vloss
            best_params = [p.value.copy() for p in model.params]
        if stop:
            break
    if best_params is not None:
        for p, v in zip(model.params, best_params):
            p.value = v
    return model, history


def one_step_cd(model, episodes):
    """Mean one-step CD (cm) over every sample of the episodes."""
    samples = [s for ep in episodes
               for s in episode_samples(ep, model.h, model.d, model.r_handle)]
    vals = []
    for bi in range(0, len(samples), 64):
        chunk = samples[bi:bi + 64]
        pred, slices = _batch_forward_np(model, chunk)
        for (_, _, target), sl in zip(chunk, slices):
            vals.append(cd_cm(pred[sl], target))
    return float(np.mean(vals))


def horizon_curve(model, episodes, horizon=10, stride=7):
    """Mean CD (cm) at each rollout depth 1..horizon, strided starts."""
    per_t = [[] for _ in range(horizon)]
    for ep in episodes:
        states = ep.states()
        handles = ep.handle_track()
        for t0 in range(model.h, len(ep.actions) - horizon + 1, stride):
            labels = label_handles(states[t0], handles[t0], model.r_handle)
            g = build_graph(states[t0], labels, model.d,
                            states[t0 - model.h:t0])
            acts = scale_raw_action(ep.actions[t0:t0 + horizon],
                                    model.r_handle)
            roll = rollout(model, g, acts)
            for k in range(horizon):
                per_t[k].append(cd_cm(roll[k + 1], states[t0 + k + 1]))
    return np.array([np.mean(v) for v in per_t])


def grad_check(model, graph, action, h_fd=1e-5):
    """Max relative error of tape gradients vs central finite differences.

    Covers every parameter element and all 8 action components on a smooth
    squared-error objective. Layer biases are jittered until every ReLU
    pre-activation clears its kink by 10*h_fd, so the probes stay on one
    linear piece (the kink set has measure zero)."""
    act8 = _action8(model, action).copy()
    target = graph.positions + np.random.default_rng(0).normal(
        0.0, 0.01, graph.positions.shape)

    def tape_forward():
        # the trace hook lives in the tape ops, so probe through them
        return forward_tape(model, graph, nn.Tensor(graph.positions),
                            [nn.Tensor(f) for f in graph.history],
                            nn.Tensor(act8, requires_grad=True))

    rng = np.random.default_rng(7)
    for _ in range(100):
        with nn.relu_trace() as zs:
            tape_forward()
        gap = min((np.abs(z).min() for z in zs if z.size), default=np.inf)
        if not zs:
            raise RuntimeError("no ReLU pre-activations recorded")
        if gap > 10.0 * h_fd:
            break
        for mlp in model.mlps.values():
            for layer in mlp.layers[:-1]:
                layer.b.value = layer.b.value + rng.uniform(
                    -100.0 * h_fd, 100.0 * h_fd, layer.b.shape)
    else:
        raise RuntimeError("could not move ReLU pre-activations off kinks")

    def loss_value(a8):
        pred = forward(model, graph, a8)
        return 0.5 * float(((pred - target) ** 2).sum())

    act_t = nn.Tensor(act8, requires_grad=True)
    pos_t = nn.Tensor(graph.positions)
    hist_t = [nn.Tensor(f) for f in graph.history]
    pred_t = forward_tape(model, graph, pos_t, hist_t, act_t)
    pred_t.backward(pred_t.value - target)

    worst = 0.0
    for p in model.params + [act_t]:
        analytic = p.grad
        flat = p.value.ravel()
        fd = np.empty(flat.shape)
        for i in range(len(flat)):
            keep = flat[i]
            flat[i] = keep + h_fd
            up = loss_value(act_t.value)
            flat[i] = keep - h_fd
            dn = loss_value(act_t.value)
            flat[i] = keep
            fd[i] = (up - dn) / (2.0 * h_fd)
        a = analytic.ravel()
        err = np.abs(a - fd) / np.maximum(1e-6, np.maximum(np.abs(a),
                                                           np.abs(fd)))
        worst = max(worst, float(err.max()))
    return worst


def save_model(path, model):
    """Versioned weight file: magic, JSON descriptor with payload hash,
    then the parameters as little-endian float64 in descriptor order."""
    payload = b"".join(np.ascontiguousarray(p.value, dtype="<f8").tobytes()
                       for p in model.params)
    desc = {
        "width": model.width, "h": model.h, "rounds": model.rounds,
        "d": model.d, "r_handle": model.r_handle,
        "delta_scale": model.delta_scale,
        "order": "phi_p,phi_e,prop,psi_e,psi_p; per layer w then b",
        "shapes": [list(p.shape) for p in model.params],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    header = json.dumps(desc, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(payload)


def load_model(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise ValueError("not a dynamics weight file (bad magic)")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    desc = json.loads(blob[8:8 + hlen].decode())
    payload = blob[8 + hlen:]
    if hashlib.sha256(payload).hexdigest() != desc["sha256"]:
        raise ValueError("weight hash mismatch: file corrupt or tampered")
    model = make_model(desc["width"], desc["h"], desc["rounds"], desc["d"],
                       desc["r_handle"], seed=0,
                       delta_scale=desc["delta_scale"])
    flat = np.frombuffer(payload, dtype="<f8")
    off = 0
    for p, shape in zip(model.params, desc["shapes"], strict=True):
        if list(p.shape) != shape:
            raise ValueError("descriptor does not match the architecture")
        size = int(np.prod(shape))
        p.value = flat[off:off + size].reshape(shape).astype(np.float64)
        off += size
    if off != len(flat):
        raise ValueError("weight payload size mismatch")
    return model
