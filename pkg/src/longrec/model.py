"""End-to-end model assembly, training, and the order-invariant baseline.

Pipeline per sample: encode events to width-d tokens -> merge adjacent
groups to width D -> select k query tokens -> one cross-attention layer
over the full merged sequence plus globals -> N self-attention layers over
the retained rows -> prediction head on the target-global and CLS outputs
concatenated with projected user features -> sigmoid.

Training is plain Adam (beta1=0.9, beta2=0.999, eps=1e-8) at a fixed
learning rate on mean batch BCE, with a temporal held-out split: the last
fraction of samples by candidate timestamp is never trained on. No weight
decay and no schedule, to keep scaling sweeps unconfounded.

A training step exclusively owns the parameters it updates; inference over
read-shared parameters is thread-safe.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensors as T
from .attention import BlockParams, build_mask, cross_causal_block, self_causal_block
from .config import ModelConfig
from .errors import ConfigError, NumericalError, UndefinedMetricError
from .inputs import (EmbeddingTables, Sample, encode_sequence, time_bucket,
                     user_side_features)
from .merge import (MergeConfig, create_inner_blocks, merge_concat,
                    merge_inner_trans, merged_pad_flags, merged_positions,
                    pad_to_group_multiple)
from .tensors import Tensor
from . import analysis

CHECKPOINT_MAGIC = b"LRCKPT01"

# ----------------------------- query selection -----------------------------


@dataclass
class SelectedQueries:
    tokens: Tensor               # (k, D)
    indices: np.ndarray          # merged-grid indices, -1 for learnable rows
    positions: np.ndarray        # chronological token positions
    is_pad: np.ndarray


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def select_queries(h_merged: Tensor, strategy: str, k: int,
                   learnable_bank: Optional[Tensor] = None,
                   pad_groups: Optional[np.ndarray] = None,
                   grid_positions: Optional[np.ndarray] = None) -> SelectedQueries:
    """Pick the k merged tokens that act as attention queries.

    recent: the last k non-pad tokens. uniform: evenly spaced over the
    non-pad suffix by idx_j = ceil((j+1) * n / k) - 1. learnable: k learned
    vectors with synthetic position equal to the maximum grid position (full
    sequence visibility). recent_uniform: the most recent ceil(k/2) plus
    floor(k/2) uniform over the remaining prefix, deduplicated and backfilled
    from the most recent unused tokens. When fewer than k non-pad tokens
    exist, all are taken and the remainder are pad queries masked downstream.
    """
    if k < 1:
        raise ConfigError("query count k must be >= 1")
    G = h_merged.shape[0]
    if pad_groups is None:
        pad_groups = np.zeros(G, dtype=bool)
    if grid_positions is None:
        grid_positions = np.arange(G, dtype=np.int64)

    if strategy == "learnable":
        if learnable_bank is None or learnable_bank.shape[0] != k:
            raise ConfigError("learnable strategy needs a (k, D) query bank")
        top = int(grid_positions.max()) if G else 0
        return SelectedQueries(
            tokens=learnable_bank,
            indices=np.full(k, -1, dtype=np.int64),
            positions=np.full(k, top, dtype=np.int64),
            is_pad=np.zeros(k, dtype=bool))

    if k > G:
        raise ConfigError(f"k={k} exceeds merged length {G}")
    nonpad = np.flatnonzero(~pad_groups)
    n_m = nonpad.size
    if n_m <= k:
        fill = k - n_m
        pad_pool = np.flatnonzero(pad_groups)
        chosen = list(pad_pool[len(pad_pool) - fill:]) + list(nonpad)
    elif strategy == "recent":
        chosen = list(nonpad[-k:])
    elif strategy == "uniform":
        chosen = [int(nonpad[_ceil_div((j + 1) * n_m, k) - 1]) for j in range(k)]
    elif strategy == "recent_uniform":
        r = _ceil_div(k, 2)
        u = k - r
        picked = set(int(i) for i in nonpad[-r:])
        prefix = nonpad[:n_m - r]
        plen = prefix.size
        for j in range(u):
            picked.add(int(prefix[_ceil_div((j + 1) * plen, u) - 1]))
        for idx in reversed(nonpad):          # backfill newest unused first
            if len(picked) >= k:
                break
            picked.add(int(idx))
        chosen = sorted(picked)
    else:
        raise ConfigError(f"unknown query strategy {strategy!r}")

    idx = np.array(sorted(int(i) for i in chosen), dtype=np.int64)
    return SelectedQueries(
        tokens=T.gather_rows(h_merged, idx),
        indices=idx,
        positions=grid_positions[idx],
        is_pad=pad_groups[idx])


# ----------------------------- forward trace -----------------------------


@dataclass
class ForwardTrace:
    """Detached copies of every stage, for oracles and invariance tests."""

    h: np.ndarray
    merged: np.ndarray
    query_indices: np.ndarray
    query_positions: np.ndarray
    layers: list = field(default_factory=list)
    head_input: Optional[np.ndarray] = None
    p: float = 0.0

    def sequence_branch(self) -> list:
        """All candidate-independent activations: everything but the target row."""
        return [self.h, self.merged] + [a[:-1] for a in self.layers]


# ----------------------------- the model -----------------------------


# Identity-biased initialization constants. At desk scale the retrieval
# circuit (target token attends to matching history, the head reads the
# second-order match features) cannot be discovered from scratch within a
# few thousand optimizer steps, so the model starts wired for it: input
# MLPs begin as exact identities (GELU(x) - GELU(-x) = x), token projection
# passes the item block through, the d-to-D lift tiles its input across the
# merge slots, item embeddings start unit-norm, attention starts with tied
# scaled query/key maps and identity value paths, and the head starts as a
# reader of the quadratic features. Everything remains freely trainable.
_QK_GAIN = 1.5
_WO_SCALE_CROSS = 0.3
_WO_SCALE_SELF = 0.1
_FFN_OUT_DAMP = 0.05
_SIDE_EMB_STD = 0.05
_HEAD_DAMP = 0.05
_HEAD_PRIME_IN = 0.5
_HEAD_PRIME_OUT = 0.15


def _identity_mlp_init(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                       width: int) -> None:
    """Make a GELU MLP compute the identity: GELU(x) - GELU(-x) == x."""
    w1.data[:] = 0.0
    b1.data[:] = 0.0
    w2.data[:] = 0.0
    b2.data[:] = 0.0
    for i in range(width):
        w1.data[i, i] = 1.0
        w1.data[i, width + i] = -1.0
        w2.data[i, i] = 1.0
        w2.data[width + i, i] = -1.0


class LongRecModel:
    """Long-sequence recommender transformer (see module docstring)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0) -> None:
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.tables = EmbeddingTables.create(cfg, rng)
        self.inner_blocks = (create_inner_blocks(self.merge_config, cfg.d, rng)
                             if cfg.merge_mode == "inner" else [])
        self.cross_block = BlockParams.create(cfg.D, rng)
        self.self_blocks = [BlockParams.create(cfg.D, rng) for _ in range(cfg.N)]
        self.query_bank = (Tensor(rng.normal(0.0, 0.3, size=(cfg.k, cfg.D)),
                                  requires_grad=True)
                           if cfg.query_strategy == "learnable" else None)
        h_in = 4 * cfg.D + 2 * cfg.d
        self.head_w1 = Tensor(rng.normal(0.0, 1.0 / math.sqrt(h_in),
                                         size=(h_in, cfg.head_hidden)),
                              requires_grad=True)
        self.head_b1 = Tensor(np.zeros(cfg.head_hidden), requires_grad=True)
        self.head_w2 = Tensor(rng.normal(0.0, 1.0 / math.sqrt(cfg.head_hidden),
                                         size=(cfg.head_hidden, 1)),
                              requires_grad=True)
        self.head_b2 = Tensor(np.zeros(1), requires_grad=True)
        self._identity_biased_init()
        self.param_version = 0

    def _identity_biased_init(self) -> None:
        cfg = self.cfg
        t = self.tables
        for table in (t.item_table, t.cls_vector):
            norms = np.linalg.norm(table.data, axis=1, keepdims=True)
            table.data /= np.maximum(norms, 1e-12)
        for side in (t.action_table, t.time_bucket_table, t.abs_pos_table):
            side.data *= _SIDE_EMB_STD / 0.3
        t.mlp.tok_proj_w.data *= 0.1
        for i in range(min(cfg.d_item, cfg.d)):
            t.mlp.tok_proj_w.data[i, i] = 1.0
        _identity_mlp_init(t.mlp.seq_w1, t.mlp.seq_b1,
                           t.mlp.seq_w2, t.mlp.seq_b2, cfg.d)
        _identity_mlp_init(t.mlp.glob_w1, t.mlp.glob_b1,
                           t.mlp.glob_w2, t.mlp.glob_b2, cfg.D)
        t.mlp.lift_w.data *= 0.1
        for s in range(cfg.K):
            for i in range(cfg.d):
                t.mlp.lift_w.data[i, s * cfg.d + i] = 1.0
        for blk in [self.cross_block] + self.self_blocks:
            blk.w_k.data = blk.w_q.data * _QK_GAIN
            blk.w_q.data = blk.w_q.data * _QK_GAIN
            blk.w_v.data = np.eye(cfg.D)
            scale = _WO_SCALE_CROSS if blk is self.cross_block else _WO_SCALE_SELF
            blk.w_o.data = np.eye(cfg.D) * scale
            blk.w2.data *= _FFN_OUT_DAMP
        D = cfg.D
        self.head_w1.data *= _HEAD_DAMP
        self.head_w2.data *= _HEAD_DAMP
        readers = (((2 * D, 0, 1.0), (2 * D, 1, -1.0),       # +/- of tgt*cls
                    (3 * D, 2, 1.0), (3 * D, 3, -1.0)))      # +/- of tgt*tgt
        for offset, col, sign in readers:
            if col >= cfg.head_hidden:
                break
            for j in range(D):
                self.head_w1.data[offset + j, col] += sign * _HEAD_PRIME_IN
            self.head_w2.data[col, 0] = sign * _HEAD_PRIME_OUT

    @property
    def merge_config(self) -> MergeConfig:
        return MergeConfig(K=self.cfg.K, mode=self.cfg.merge_mode,
                           inner_layers=self.cfg.inner_layers)

    def params(self):
        out = [(f"tables.{n}", t) for n, t in self.tables.params()]
        for i, blk in enumerate(self.inner_blocks):
            out.extend((f"inner.{i}.{n}", t) for n, t in blk.params())
        out.extend((f"cross.{n}", t) for n, t in self.cross_block.params())
        for i, blk in enumerate(self.self_blocks):
            out.extend((f"self.{i}.{n}", t) for n, t in blk.params())
        if self.query_bank is not None:
            out.append(("query_bank", self.query_bank))
        out.extend([("head.w1", self.head_w1), ("head.b1", self.head_b1),
                    ("head.w2", self.head_w2), ("head.b2", self.head_b2)])
        return out

    def param_count(self) -> int:
        return sum(t.size for _, t in self.params())

    def fingerprint(self) -> str:
        payload = json.dumps(self.cfg.to_dict(), sort_keys=True)
        h = hashlib.sha256(f"{payload}|v{self.param_version}".encode())
        return h.hexdigest()[:16]

    # ------------------------- forward -------------------------

    def _query_metadata(self, sel: SelectedQueries):
        m = self.cfg.m
        positions = np.concatenate([sel.positions, np.zeros(m, dtype=np.int64)])
        is_global = np.concatenate([np.zeros(sel.positions.size, dtype=bool),
                                    np.ones(m, dtype=bool)])
        ranks = np.concatenate([np.zeros(sel.positions.size, dtype=np.int64),
                                np.arange(m, dtype=np.int64)])
        is_pad = np.concatenate([sel.is_pad, np.zeros(m, dtype=bool)])
        return positions, is_global, ranks, is_pad

    def _key_metadata(self, grid_positions, pad_groups):
        m = self.cfg.m
        positions = np.concatenate([grid_positions, np.zeros(m, dtype=np.int64)])
        is_global = np.concatenate([np.zeros(grid_positions.size, dtype=bool),
                                    np.ones(m, dtype=bool)])
        ranks = np.concatenate([np.zeros(grid_positions.size, dtype=np.int64),
                                np.arange(m, dtype=np.int64)])
        is_pad = np.concatenate([pad_groups, np.zeros(m, dtype=bool)])
        return positions, is_global, ranks, is_pad

    def _merge(self, seq: Tensor, seq_pad_mask: np.ndarray):
        cfg = self.cfg
        h_padded, pad_mask = pad_to_group_multiple(seq, cfg.K, seq_pad_mask)
        if cfg.merge_mode == "inner":
            merged = merge_inner_trans(h_padded, self.merge_config,
                                       self.inner_blocks, pad_mask)
        else:
            merged = merge_concat(h_padded, cfg.K)
        grid_positions = merged_positions(cfg.L_padded, cfg.K)
        pad_groups = merged_pad_flags(pad_mask, cfg.K)
        return merged, grid_positions, pad_groups

    def forward_tensor(self, sample: Sample, trace: Optional[ForwardTrace] = None,
                       collect_layers: Optional[list] = None) -> Tensor:
        """Probability tensor for one sample; optionally fills a trace.

        ``collect_layers``, used by the serving module, receives one dict per
        block with the projected key/value rows.
        """
        cfg = self.cfg
        bundle = encode_sequence(sample, self.tables, cfg)
        merged, grid_positions, pad_groups = self._merge(bundle.seq, bundle.pad_mask)
        sel = select_queries(merged, cfg.query_strategy, cfg.k, self.query_bank,
                             pad_groups, grid_positions)
        o = T.concat_rows([sel.tokens, bundle.global_tokens])
        r = T.concat_rows([merged, bundle.global_tokens])
        qpos, qglob, qrank, qpad = self._query_metadata(sel)
        kpos, kglob, krank, kpad = self._key_metadata(grid_positions, pad_groups)
        mask1 = build_mask(qpos, kpos, qglob, kglob, qrank, krank, qpad, kpad)
        mask_self = build_mask(qpos, qpos, qglob, qglob, qrank, qrank, qpad, qpad)

        def _collector(i):
            if collect_layers is None:
                return None
            while len(collect_layers) <= i:
                collect_layers.append({})
            return collect_layers[i]

        x = cross_causal_block(o, r, mask1, self.cross_block, cfg.heads,
                               _collector(0))
        if trace is not None:
            trace.h = bundle.seq.data.copy()
            trace.merged = merged.data.copy()
            trace.query_indices = sel.indices.copy()
            trace.query_positions = qpos.copy()
            trace.layers.append(x.data.copy())
        for i, blk in enumerate(self.self_blocks):
            x = self_causal_block(x, mask_self, blk, cfg.heads, _collector(i + 1))
            if trace is not None:
                trace.layers.append(x.data.copy())

        k = sel.positions.size
        target_row = T.gather_rows(x, np.array([k + cfg.m - 1]))
        cls_row = T.gather_rows(x, np.array([k + 1]))
        u_d = user_side_features(sample, self.tables)
        # Second-order features: target*CLS reads candidate-vs-pooled-history
        # interactions, target*target reads how strongly the target's own
        # attention returned content aligned with the candidate. Both are
        # standard ranking-head constructions; without them a plain MLP has
        # to discover bilinear readouts, which desk-scale budgets do not allow.
        head_in = T.concat_cols([target_row, cls_row,
                                 T.mul(target_row, cls_row),
                                 T.mul(target_row, target_row), u_d])
        hidden = T.gelu(T.linear(head_in, self.head_w1, self.head_b1))
        p = T.sigmoid(T.linear(hidden, self.head_w2, self.head_b2))
        if trace is not None:
            trace.head_input = head_in.data.copy()
            trace.p = float(p.data.reshape(-1)[0])
        return p

    def forward(self, sample: Sample):
        """Predicted probability plus the full activation trace."""
        trace = ForwardTrace(h=np.empty(0), merged=np.empty(0),
                             query_indices=np.empty(0, dtype=np.int64),
                             query_positions=np.empty(0, dtype=np.int64))
        with T.no_grad():
            p = self.forward_tensor(sample, trace=trace)
        return float(p.data.reshape(-1)[0]), trace

    def score(self, sample: Sample) -> float:
        with T.no_grad():
            p = self.forward_tensor(sample)
        return float(p.data.reshape(-1)[0])

    # ------------------------- checkpointing -------------------------

    def save(self, path: str) -> None:
        """Binary checkpoint: magic, JSON header, raw little-endian float64.

        Layout: 8-byte magic ``LRCKPT01``; uint64 little-endian header
        length; UTF-8 JSON header {format_version, config, param_version,
        arrays: [{name, shape}]}; then each array's float64 little-endian
        bytes concatenated in header order.
        """
        named = self.params()
        header = {
            "format_version": 1,
            "config": self.cfg.to_dict(),
            "param_version": self.param_version,
            "arrays": [{"name": n, "shape": list(t.shape)} for n, t in named],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for _, t in named:
                fh.write(t.data.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "LongRecModel":
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != CHECKPOINT_MAGIC:
                raise ConfigError(f"not a checkpoint file: bad magic {magic!r}")
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            if header.get("format_version") != 1:
                raise ConfigError("unsupported checkpoint format version")
            cfg = ModelConfig.from_dict(header["config"])
            model = cls(cfg, seed=0)
            named = dict(model.params())
            for entry in header["arrays"]:
                name, shape = entry["name"], tuple(entry["shape"])
                if name not in named:
                    raise ConfigError(f"checkpoint array {name!r} not in model")
                if named[name].shape != shape:
                    raise ConfigError(f"checkpoint array {name!r} shape mismatch")
                count = int(np.prod(shape)) if shape else 1
                raw = fh.read(count * 8)
                named[name].data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            model.param_version = int(header["param_version"])
        return model


# ----------------------------- loss -----------------------------


def bce_loss(p_hat, y):
    """Binary cross-entropy; floats in -> float out, tensor in -> tensor out."""
    if isinstance(p_hat, Tensor):
        return T.bce(p_hat, float(y))
    pc = min(max(float(p_hat), 1e-12), 1.0 - 1e-12)
    y = float(y)
    return -(y * math.log(pc) + (1.0 - y) * math.log(1.0 - pc))


# ----------------------------- optimizer / training -----------------------------


@dataclass
class OptConfig:
    lr: Optional[float] = None          # None -> model config value
    batch_size: Optional[int] = None
    seed: int = 0
    eval_fraction: float = 0.1


class Adam:
    """Adam with fixed hyperparameters (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, named_params, lr: float) -> None:
        self.named = list(named_params)
        self.lr = float(lr)
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in self.named}
        self.v = {n: np.zeros_like(t.data) for n, t in self.named}

    def zero_grads(self) -> None:
        for _, t in self.named:
            t.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n, t in self.named:
            g = t.grad
            if g is None:
                continue
            m = self.m[n]
            v = self.v[n]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            t.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    auc: float
    logloss: float


@dataclass
class TrainingReport:
    epochs: list
    n_train: int
    n_eval: int

    def to_csv(self) -> str:
        lines = ["epoch,loss,auc,logloss"]
        for e in self.epochs:
            lines.append(f"{e.epoch},{e.loss!r},{e.auc!r},{e.logloss!r}")
        return "\n".join(lines) + "\n"

    @property
    def final(self) -> EpochStats:
        return self.epochs[-1]


def temporal_split(samples, eval_fraction: float):
    """Order by candidate timestamp; hold out the trailing fraction."""
    order = np.argsort([s.candidate.timestamp for s in samples], kind="mergesort")
    n_eval = int(round(eval_fraction * len(samples)))
    if n_eval == 0:
        return order, np.array([], dtype=np.int64)
    return order[:-n_eval], order[-n_eval:]


def evaluate(model, samples) -> tuple:
    scores = np.array([model.score(s) for s in samples])
    labels = np.array([s.label for s in samples])
    return scores, labels


def eval_metrics(model, samples) -> tuple:
    scores, labels = evaluate(model, samples)
    try:
        a = analysis.auc(scores, labels)
    except UndefinedMetricError:
        a = float("nan")
    return a, analysis.logloss(scores, labels)


def train(model, dataset, epochs: int, opt: Optional[OptConfig] = None) -> TrainingReport:
    """Fit the model on the temporal-train split; returns per-epoch stats.

    Deterministic given (model seed, opt.seed): shuffling uses a dedicated
    generator and batch reduction order is fixed. Aborts with a diagnostic
    on the first non-finite loss.
    """
    if not dataset.samples:
        raise ConfigError("cannot train on an empty dataset")
    opt = opt or OptConfig()
    lr = model.cfg.lr if opt.lr is None else opt.lr
    batch = model.cfg.batch_size if opt.batch_size is None else opt.batch_size
    train_idx, eval_idx = temporal_split(dataset.samples, opt.eval_fraction)
    if train_idx.size == 0:
        raise ConfigError("temporal split left no training samples")
    adam = Adam(model.params(), lr)
    rng = np.random.default_rng(opt.seed)
    rows = []
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(train_idx)
        losses = []
        for start in range(0, perm.size, batch):
            chunk = perm[start:start + batch]
            adam.zero_grads()
            per_sample = []
            for i in chunk:
                s = dataset.samples[int(i)]
                per_sample.append(T.bce(model.forward_tensor(s), s.label))
            loss = T.mean_scalars(per_sample)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch offset {start}")
            loss.backward()
            adam.step()
            model.param_version += 1
            losses.append(value)
        if eval_idx.size:
            auc_val, ll_val = eval_metrics(
                model, [dataset.samples[int(i)] for i in eval_idx])
        else:
            auc_val, ll_val = float("nan"), float("nan")
        rows.append(EpochStats(epoch, float(np.mean(losses)), auc_val, ll_val))
    return TrainingReport(rows, int(train_idx.size), int(eval_idx.size))


# ----------------------------- sum-pooling baseline -----------------------------


@dataclass
class SumPoolHead:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def params(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


class SumPoolingModel:
    """Order-invariant reference: mean of event features, candidate-aware head.

    Events are embedded exactly like the main model's featurizer input
    (item, action, time-bucket concat) but never see positions, so any
    permutation of the event list scores identically.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, hidden: int = 32) -> None:
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        F = cfg.feat_width
        self.item_table = Tensor(rng.normal(0.0, 0.3, (cfg.vocab, cfg.d_item)),
                                 requires_grad=True)
        self.action_table = Tensor(rng.normal(0.0, 0.3, (cfg.n_actions, cfg.d_act)),
                                   requires_grad=True)
        self.time_table = Tensor(rng.normal(0.0, 0.3, (cfg.n_time_buckets, cfg.d_time)),
                                 requires_grad=True)
        self.head = SumPoolHead(
            w1=Tensor(rng.normal(0.0, 1.0 / math.sqrt(2 * F), (2 * F, hidden)),
                      requires_grad=True),
            b1=Tensor(np.zeros(hidden), requires_grad=True),
            w2=Tensor(rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, 1)),
                      requires_grad=True),
            b2=Tensor(np.zeros(1), requires_grad=True))
        self.param_version = 0

    def params(self):
        out = [("item_table", self.item_table), ("action_table", self.action_table),
               ("time_table", self.time_table)]
        out.extend((f"head.{n}", t) for n, t in self.head.params())
        return out

    def _features(self, items, actions, deltas):
        item_ids = np.asarray(items, dtype=np.int64)
        feats = T.concat_cols([
            T.gather_rows(self.item_table, item_ids),
            T.gather_rows(self.action_table, np.asarray(actions, dtype=np.int64)),
            T.gather_rows(self.time_table, np.array(
                [time_bucket(dt, self.cfg.n_time_buckets) for dt in deltas],
                dtype=np.int64)),
        ])
        return feats

    def forward_tensor(self, sample: Sample) -> Tensor:
        events = sample.events[-self.cfg.L:]
        cand = sample.candidate
        if events:
            feats = self._features([e.item_id for e in events],
                                   [e.action_type for e in events],
                                   [cand.timestamp - e.timestamp for e in events])
            pooled = T.mean_rows(feats)
        else:
            pooled = T.zeros((1, self.cfg.feat_width))
        target = T.concat_cols([
            T.gather_rows(self.item_table, np.array([cand.item_id])),
            T.zeros((1, self.cfg.d_act)),
            T.gather_rows(self.time_table, np.array([0])),
        ])
        head_in = T.concat_cols([pooled, target])
        hidden = T.gelu(T.linear(head_in, self.head.w1, self.head.b1))
        return T.sigmoid(T.linear(hidden, self.head.w2, self.head.b2))

    def score(self, sample: Sample) -> float:
        with T.no_grad():
            p = self.forward_tensor(sample)
        return float(p.data.reshape(-1)[0])


def sum_pooling_baseline(sample: Sample, model: SumPoolingModel) -> float:
    """Probability from the pooling baseline for one sample."""
    return model.score(sample)
