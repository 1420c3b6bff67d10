"""The RI-GCN pipeline: local descriptor extraction, hierarchical descriptor
extension, per-level graph abstraction, and the classification head.

A forward pass is a pure function of (cloud, parameters) in deterministic
mode; stochastic mode additionally draws per-anchor neighborhood sizes,
dilation rates, and per-level graph degrees from the configured intervals.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import geom, graph, nnet


class ConfigError(ValueError):
    """Raised when a configuration violates its invariants."""


_TUPLE_FIELDS = ("level_sizes", "channels", "k_range", "d_range", "khat_range")


@dataclass(frozen=True)
class RiGcnConfig:
    """Architecture and stochasticity settings.

    ``level_sizes`` and ``channels`` may be left as ``None`` to derive a
    pyramid from ``num_points`` (halve once, then quarter per level) and the
    64/128/256/512 width ladder.
    """

    num_points: int = 1024
    num_classes: int = 8
    levels: int = 3
    level_sizes: tuple[int, ...] | None = None
    channels: tuple[int, ...] | None = None
    k_range: tuple[int, int] = (24, 40)
    d_range: tuple[int, int] = (1, 4)
    khat_range: tuple[int, int] = (6, 12)
    g_hidden: int = 32
    classifier_hidden: int = 128
    stochastic_k: bool = True
    stochastic_d: bool = True
    stochastic_khat: bool = True
    abstraction: str = "gcn"
    transform_scope: str = "local"
    seed: int = 0

    def resolved_level_sizes(self) -> tuple[int, ...]:
        if self.level_sizes is not None:
            return tuple(int(m) for m in self.level_sizes)
        sizes = [self.num_points // 2]
        for _ in range(self.levels - 1):
            sizes.append(sizes[-1] // 4)
        return tuple(sizes)

    def resolved_channels(self) -> tuple[int, ...]:
        if self.channels is not None:
            return tuple(int(c) for c in self.channels)
        return tuple(64 * 2**l for l in range(self.levels))

    def validate(self) -> None:
        if not 1 <= self.levels <= 4:
            raise ConfigError(f"levels must be in [1, 4], got {self.levels}")
        sizes = self.resolved_level_sizes()
        if len(sizes) != self.levels:
            raise ConfigError(f"need {self.levels} level sizes, got {sizes}")
        if sizes[0] > self.num_points:
            raise ConfigError(f"level 0 size {sizes[0]} exceeds num_points {self.num_points}")
        if any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise ConfigError(f"level sizes must be strictly decreasing, got {sizes}")
        if sizes[-1] < 2:
            raise ConfigError(f"every level needs >= 2 points, got {sizes}")
        channels = self.resolved_channels()
        if len(channels) != self.levels:
            raise ConfigError(f"need {self.levels} channel widths, got {channels}")
        if any(c < 2 or c % 2 for c in channels):
            raise ConfigError(f"channel widths must be even and >= 2, got {channels}")
        for name, (lo, hi) in (
            ("k_range", self.k_range),
            ("d_range", self.d_range),
            ("khat_range", self.khat_range),
        ):
            if lo < 1 or hi < lo:
                raise ConfigError(f"invalid {name} [{lo}, {hi}]")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.g_hidden < 1 or self.classifier_hidden < 1:
            raise ConfigError("hidden widths must be >= 1")
        if self.abstraction not in ("gcn", "mlp"):
            raise ConfigError(f"abstraction must be 'gcn' or 'mlp', got {self.abstraction!r}")
        if self.transform_scope not in ("local", "global"):
            raise ConfigError(
                f"transform_scope must be 'local' or 'global', got {self.transform_scope!r}"
            )


def config_to_dict(config: RiGcnConfig) -> dict:
    out = asdict(config)
    for key in _TUPLE_FIELDS:
        if out[key] is not None:
            out[key] = list(out[key])
    return out


def config_from_dict(data: dict) -> RiGcnConfig:
    known = {f for f in RiGcnConfig.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    kwargs = dict(data)
    for key in _TUPLE_FIELDS:
        if kwargs.get(key) is not None:
            kwargs[key] = tuple(kwargs[key])
    return RiGcnConfig(**kwargs)


@dataclass
class DescriptorSet:
    """Representative points of one level with their reused principal axes
    and per-point feature rows (the level's graph signal)."""

    level: int
    points: np.ndarray
    axes: np.ndarray
    features: nnet.Node


class RiGcnModel:
    """All learnable parameters, keyed by block name, plus the config."""

    def __init__(self, config: RiGcnConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        channels = config.resolved_channels()
        self.g1: list[list[nnet.Parameter]] = []
        self.g2: list[nnet.Parameter] | None = None
        self.h: list[list[nnet.Parameter] | None] = []
        self.f: list[list[nnet.Parameter]] = []
        self.gcn_w: list[nnet.Parameter] = []
        for l, c in enumerate(channels):
            branch = c // 2
            self.g1.append(nnet.init_mlp(nnet.MlpSpec((3, config.g_hidden, branch)), rng, f"l{l}.g1"))
            if l == 0:
                self.g2 = nnet.init_mlp(nnet.MlpSpec((3, config.g_hidden, branch)), rng, "l0.g2")
                self.h.append(None)
            else:
                self.h.append(
                    nnet.init_mlp(nnet.MlpSpec((channels[l - 1], branch, branch)), rng, f"l{l}.h")
                )
            self.f.append(nnet.init_mlp(nnet.MlpSpec((c, c, c)), rng, f"l{l}.f"))
            self.gcn_w.append(nnet.init_parameter(f"l{l}.gcn", (c, c), rng))
        clf_spec = nnet.MlpSpec((sum(channels), config.classifier_hidden, config.num_classes))
        self.clf = nnet.init_mlp(clf_spec, rng, "clf")

    def parameters(self) -> list[nnet.Parameter]:
        params: list[nnet.Parameter] = []
        for l in range(self.config.levels):
            params.extend(self.g1[l])
            if l == 0:
                params.extend(self.g2)
            else:
                params.extend(self.h[l])
            params.extend(self.f[l])
            params.append(self.gcn_w[l])
        params.extend(self.clf)
        return params


def save_model(model: RiGcnModel, path) -> None:
    nnet.save_checkpoint(path, config_to_dict(model.config), model.parameters())


def load_model(path) -> RiGcnModel:
    config_dict, values = nnet.load_checkpoint(path)
    model = RiGcnModel(config_from_dict(config_dict))
    for p in model.parameters():
        if p.name not in values:
            raise ValueError(f"checkpoint is missing parameter {p.name!r}")
        if values[p.name].shape != p.value.shape:
            raise ValueError(
                f"checkpoint parameter {p.name!r} has shape {values[p.name].shape}, "
                f"expected {p.value.shape}"
            )
        p.value[...] = values[p.name]
    return model


def _per_anchor_kd(
    config: RiGcnConfig, count: int, rng: np.random.Generator | None, stochastic: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor (k, d) draws honoring the individual stochastic toggles;
    deterministic components use the interval midpoint."""
    (k_lo, k_hi), (d_lo, d_hi) = config.k_range, config.d_range
    if stochastic and config.stochastic_k:
        ks = rng.integers(k_lo, k_hi + 1, size=count)
    else:
        ks = np.full(count, (k_lo + k_hi) // 2)
    if stochastic and config.stochastic_d:
        ds = rng.integers(d_lo, d_hi + 1, size=count)
    else:
        ds = np.full(count, (d_lo + d_hi) // 2)
    return ks, ds


def _gather_patches(
    points: np.ndarray, anchor_indices: np.ndarray, ks: np.ndarray, ds: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Member indices for the k-NN and dilated patches of many anchors.

    Returns (flat_knn, offsets_knn, flat_dilated, offsets_dilated) where the
    flat arrays index into ``points``. Semantics match ``geom.dilated_knn``
    with d=1 and d=ds[i] respectively, including clamping and padding.
    """
    pts = points
    n = len(pts)
    m = len(anchor_indices)
    diff = pts[anchor_indices][:, None, :] - pts[None, :, :]
    d2 = np.einsum("mnk,mnk->mn", diff, diff)
    d2[np.arange(m), anchor_indices] = np.inf

    # Per-anchor sorted-list positions, replicating the clamping rule of
    # ``geom.dilated_positions``; padding repeats position 0, so every patch
    # has exactly k members and gathers stay uniform.
    ks = np.asarray(ks, dtype=np.int64)
    n_cand = n - 1
    d1 = np.ones(m, dtype=np.int64)
    d1_eff = np.where((ks - 1) * d1 >= n_cand, np.maximum(1, n_cand // ks), d1)
    dd_eff = np.where((ks - 1) * ds >= n_cand, np.maximum(1, n_cand // ks), ds)
    take1 = np.where((ks - 1) * d1_eff < n_cand, ks, n_cand)
    taked = np.where((ks - 1) * dd_eff < n_cand, ks, n_cand)
    off = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(ks, out=off[1:])
    pos_in_seg = np.arange(off[-1]) - np.repeat(off[:-1], ks)
    cols1 = np.where(pos_in_seg < np.repeat(take1, ks), pos_in_seg * np.repeat(d1_eff, ks), 0)
    colsd = np.where(pos_in_seg < np.repeat(taked, ks), pos_in_seg * np.repeat(dd_eff, ks), 0)
    used_max = int(max(cols1.max(), colsd.max()))

    # Only a sorted prefix of each candidate list is ever consumed.
    prefix = min(used_max + 2, n - 1)
    part = np.argpartition(d2, prefix - 1, axis=1)[:, :prefix]
    part_d2 = np.take_along_axis(d2, part, axis=1)
    sub = np.argsort(part_d2, axis=1, kind="stable")
    order = np.take_along_axis(part, sub, axis=1)
    sorted_d2 = np.take_along_axis(part_d2, sub, axis=1)
    # A distance tie anywhere in the prefix falls back to the exact
    # lexicographic candidate ordering for that anchor.
    for i in np.flatnonzero(np.any(np.diff(sorted_d2, axis=1) == 0.0, axis=1)):
        exact = geom.sorted_candidates(pts, int(anchor_indices[i]))[:prefix]
        order[i, : len(exact)] = exact

    rows = np.repeat(np.arange(m), ks)
    return order[rows, cols1], off, order[rows, colsd], off


def _project_segments(
    points: np.ndarray,
    flat_members: np.ndarray,
    offsets: np.ndarray,
    anchors: np.ndarray,
    axes: np.ndarray,
) -> np.ndarray:
    """Frame-relative coordinates of every member point of every segment."""
    seg_ids = np.repeat(np.arange(len(anchors)), np.diff(offsets))
    rel = points[flat_members] - anchors[seg_ids]
    return np.einsum("ti,tia->ta", rel, axes[seg_ids])


def extract_descriptors(
    model: RiGcnModel,
    points: np.ndarray,
    rng: np.random.Generator | None,
    stochastic: bool,
) -> DescriptorSet:
    """Level-0 descriptors: one feature row per representative point.

    Per anchor, a plain k-NN patch and a dilated patch are projected onto
    the anchor's PCA frame (estimated from the dilated patch), encoded by
    the two per-point MLP branches, max-pooled, concatenated, and fused.
    In global-transformation mode the per-anchor frames are the identity and
    the caller is expected to have canonically rotated the whole cloud.
    """
    cfg = model.config
    m0 = cfg.resolved_level_sizes()[0]
    if len(points) < m0:
        raise ConfigError(f"cloud has {len(points)} points but level 0 needs {m0}")
    sel = geom.farthest_point_sampling(points, m0)
    anchors = points[sel]
    ks, ds = _per_anchor_kd(cfg, m0, rng, stochastic)
    flat1, off1, flatd, offd = _gather_patches(points, sel, ks, ds)
    if cfg.transform_scope == "global":
        axes = np.broadcast_to(np.eye(3), (m0, 3, 3)).copy()
    else:
        axes = geom.lrf_axes_batch(points[flatd], offd, anchors)
    proj1 = _project_segments(points, flat1, off1, anchors, axes)
    projd = _project_segments(points, flatd, offd, anchors, axes)
    h1 = nnet.segment_maxpool(nnet.mlp(model.g1[0], nnet.constant(proj1)), off1)
    hd = nnet.segment_maxpool(nnet.mlp(model.g2, nnet.constant(projd)), offd)
    features = nnet.mlp(model.f[0], nnet.concat_cols([h1, hd]))
    return DescriptorSet(level=0, points=anchors, axes=axes, features=features)


def extend_descriptors(
    model: RiGcnModel,
    prev: DescriptorSet,
    level: int,
    rng: np.random.Generator | None,
    stochastic: bool,
) -> DescriptorSet:
    """One hierarchy step: subsample anchors, fuse coordinate and descriptor
    branches over previous-level neighbors.

    Surviving anchors keep the axes estimated at level 0; they are never
    recomputed. The coordinate branch projects neighbor positions with those
    reused axes; the descriptor branch runs a per-neighbor MLP over the
    previous level's feature rows, max-pooled per anchor.
    """
    cfg = model.config
    m_l = cfg.resolved_level_sizes()[level]
    if m_l > len(prev.points):
        raise ConfigError(
            f"level {level} size {m_l} exceeds previous level size {len(prev.points)}"
        )
    sel = geom.farthest_point_sampling(prev.points, m_l)
    anchors = prev.points[sel]
    axes = prev.axes[sel]
    ks, _ = _per_anchor_kd(cfg, m_l, rng, stochastic)
    flat, off, _, _ = _gather_patches(prev.points, sel, ks, np.ones(m_l, dtype=np.int64))
    proj = _project_segments(prev.points, flat, off, anchors, axes)
    h_coord = nnet.segment_maxpool(nnet.mlp(model.g1[level], nnet.constant(proj)), off)
    h_desc = nnet.segment_maxpool(
        nnet.mlp(model.h[level], nnet.gather_rows(prev.features, flat)), off
    )
    features = nnet.mlp(model.f[level], nnet.concat_cols([h_coord, h_desc]))
    return DescriptorSet(level=level, points=anchors, axes=axes, features=features)


def level_graph_params(config: RiGcnConfig, n_nodes: int, stochastic: bool) -> graph.GraphParams:
    """Graph degree interval for a level, clamped so khat stays below the
    node count (small top levels would otherwise be unbuildable)."""
    lo, hi = config.khat_range
    lo, hi = min(lo, n_nodes - 1), min(hi, n_nodes - 1)
    return graph.GraphParams(khat=(lo, hi), stochastic=stochastic and config.stochastic_khat)


def abstract_level(
    model: RiGcnModel,
    desc: DescriptorSet,
    rng: np.random.Generator | None,
    stochastic: bool,
) -> nnet.Node:
    """Level summary: graph convolution over the level's k-NN graph followed
    by max pooling. The MLP variant drops the adjacency (identity graph)."""
    n = len(desc.points)
    if n < 2:
        raise graph.DegenerateGraphError(f"level {desc.level} has {n} < 2 nodes")
    w = model.gcn_w[desc.level]
    if model.config.abstraction == "gcn":
        params = level_graph_params(model.config, n, stochastic)
        g = graph.build_knn_graph(desc.points, params, rng)
        h = nnet.gcn_layer(graph.renormalize(g).entries, desc.features, w)
    else:
        h = nnet.relu(nnet.linear(w, desc.features))
    return nnet.maxpool_rows(h)


def level_descriptors(
    model: RiGcnModel,
    points: np.ndarray,
    rng: np.random.Generator | None = None,
    stochastic: bool = False,
) -> list[DescriptorSet]:
    """All per-level descriptor sets for one cloud (shared by forward and
    the graph-export path)."""
    cfg = model.config
    pts = np.asarray(points, dtype=np.float64)
    if cfg.transform_scope == "global":
        frame = geom.global_pca_frame(pts)
        pts = geom.project_to_lrf(frame, pts)
    descs = [extract_descriptors(model, pts, rng, stochastic)]
    for level in range(1, cfg.levels):
        descs.append(extend_descriptors(model, descs[-1], level, rng, stochastic))
    return descs


def forward(
    model: RiGcnModel,
    points: np.ndarray,
    rng: np.random.Generator | None = None,
    stochastic: bool = False,
) -> nnet.Node:
    """Class logits for one normalized cloud, as a (1, num_classes) node."""
    descs = level_descriptors(model, points, rng, stochastic)
    summaries = [abstract_level(model, d, rng, stochastic) for d in descs]
    fused = summaries[0] if len(summaries) == 1 else nnet.concat_cols(summaries)
    return nnet.mlp(model.clf, fused)


def logits(model: RiGcnModel, points: np.ndarray) -> np.ndarray:
    """Deterministic logits as a flat vector."""
    return forward(model, points, None, stochastic=False).value.ravel()


@dataclass(frozen=True)
class EpochMetrics:
    mean_loss: float
    accuracy: float


def train_epoch(
    model: RiGcnModel,
    clouds: list[np.ndarray],
    labels: np.ndarray,
    rotation_mode: str,
    opt_state: nnet.OptimizerState,
    rng: np.random.Generator,
) -> EpochMetrics:
    """One pass over the training set in a seeded shuffle order.

    Each sample is rotation-augmented per ``rotation_mode`` (none/z/so3),
    pushed through a stochastic forward pass, and applied immediately.
    """
    if len(clouds) == 0:
        raise ValueError("empty training split")
    order = rng.permutation(len(clouds))
    total_loss = 0.0
    correct = 0
    for idx in order:
        pts = clouds[idx]
        if rotation_mode != "none":
            pts = geom.rotate(pts, geom.random_rotation(rng, rotation_mode))
        out = forward(model, pts, rng, stochastic=True)
        loss_node = nnet.cross_entropy(out, int(labels[idx]))
        loss = float(loss_node.value)
        if not np.isfinite(loss):
            raise nnet.TrainingDivergenceError(f"non-finite loss at sample {idx}")
        nnet.backward(loss_node)
        nnet.optimizer_step(opt_state, model.parameters())
        total_loss += loss
        correct += int(np.argmax(out.value.ravel()) == labels[idx])
    return EpochMetrics(mean_loss=total_loss / len(clouds), accuracy=correct / len(clouds))


@dataclass
class EvalResult:
    accuracy: float
    mean_loss: float
    per_class_correct: np.ndarray
    per_class_total: np.ndarray
    predictions: np.ndarray

    def per_class_accuracy(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.where(
                self.per_class_total > 0, self.per_class_correct / self.per_class_total, np.nan
            )


def evaluate(
    model: RiGcnModel,
    clouds: list[np.ndarray],
    labels: np.ndarray,
    rotation_mode: str,
    rng: np.random.Generator | None,
) -> EvalResult:
    """Deterministic-forward accuracy under a test-time rotation protocol."""
    if len(clouds) == 0:
        raise ValueError("empty evaluation split")
    n_classes = model.config.num_classes
    correct = np.zeros(n_classes, dtype=np.int64)
    total = np.zeros(n_classes, dtype=np.int64)
    predictions = np.empty(len(clouds), dtype=np.int64)
    total_loss = 0.0
    for i, (pts, label) in enumerate(zip(clouds, labels)):
        if rotation_mode != "none":
            pts = geom.rotate(pts, geom.random_rotation(rng, rotation_mode))
        out = logits(model, pts)
        loss, _ = nnet.softmax_cross_entropy(out, int(label))
        total_loss += loss
        pred = int(np.argmax(out))
        predictions[i] = pred
        total[label] += 1
        correct[label] += int(pred == label)
    return EvalResult(
        accuracy=float(correct.sum() / total.sum()),
        mean_loss=total_loss / len(clouds),
        per_class_correct=correct,
        per_class_total=total,
        predictions=predictions,
    )
