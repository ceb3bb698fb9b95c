"""Three-step boundless adaptation pipeline and its ablation baselines.

Step 1   pretrain on labeled source pixels, then fine-tune with entropy
         minimization on the target pixels F^pre is most confident about.
Step 2   train a generator of pixel features conditioned on class embedding
         and domain, supervised by source ground truth and confident target
         pseudo-labels, with a domain discriminator in the loop.
Step 3   retrain the classifier head on real shared-class features plus
         synthesized private-class features, then self-train the whole
         segmenter on confident pseudo-labels over all classes.

Modes ``zs3``, ``zs3-uda`` and ``zs3-adapt`` are the ablation baselines;
they use a domain-agnostic generator (flag fixed to 0, no adversary) trained
on source features only, and skip self-training.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import losses as L
from . import tensor as T
from .errors import ContractError
from .metrics import ABSENT, ConfusionMatrix, MetricsReport, accumulate_confusion, gzsl_report
from .models import Discriminator, Generator, Segmenter, save_checkpoint
from .optim import Adam, SGDPoly
from .scenario import Dataset, Split
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)

MODES = ("zs3", "zs3-uda", "zs3-adapt", "budanet")
IGNORED = -1
SOURCE, TARGET = 0, 1


@dataclass
class PipelineConfig:
    mode: str = "budanet"
    lambda_ent: float = 0.01
    lambda_adv: float = 0.1
    k_pct: float = 50.0
    p_pct: float = 50.0
    n_gen_per_class: int = 200
    use_oracle_labels: bool = False
    # architecture
    d_hidden: int = 32
    d_f: int = 16
    d_z: int = 8
    gen_dropout: float = 0.5
    # schedule
    pretrain_epochs: int = 10
    adapt_epochs: int = 10
    gen_iters: int = 1000
    head_epochs: int = 30
    selftrain_epochs: int = 2
    batch_grids: int = 8
    gen_batch: int = 64
    head_batch: int = 128
    # optimizers
    seg_lr: float = 1e-2
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    head_lr: float = 1e-2
    selftrain_lr: float = 1e-3
    gen_lr: float = 1e-3
    # generative loss
    bandwidths: tuple = L.DEFAULT_BANDWIDTHS
    auto_bandwidth: bool = False
    mmd_normalize: bool = True

    def __post_init__(self):
        self.bandwidths = tuple(float(s) for s in self.bandwidths)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not (0 < self.k_pct <= 100 and 0 < self.p_pct <= 100):
            raise ContractError("k_pct and p_pct must lie in (0, 100]")
        if self.lambda_ent < 0 or self.lambda_adv < 0:
            raise ContractError("loss weights must be non-negative")
        L.KernelBandwidths(self.bandwidths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bandwidths"] = list(self.bandwidths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def domain_aware(self) -> bool:
        return self.mode == "budanet"

    def active_losses(self) -> dict[str, bool]:
        """Which objectives a run of this configuration actually optimizes."""
        step1 = self.mode != "zs3" and self.lambda_ent > 0 and self.adapt_epochs > 0
        return {
            "segmentation_ce": True,
            "min_ent": step1,
            "shared_adaptation": step1 and self.mode in ("zs3-adapt", "budanet") and self.k_pct < 100,
            "gmmn": True,
            "domain_aware_zsl": self.domain_aware,
            "adversarial": self.domain_aware and self.lambda_adv > 0,
            "self_training": self.domain_aware and self.selftrain_epochs > 0,
        }


def keep_count(pct: float, n: int) -> int:
    """max(1, round(pct * n / 100)) with halves rounded up."""
    return max(1, int(math.floor(pct * n / 100.0 + 0.5)))


def _ranked(conf: np.ndarray) -> np.ndarray:
    """Indices by descending confidence, ties by ascending index."""
    return np.argsort(-conf, kind="stable")


# ---------------------------------------------------------------- step 1

def _batches(n: int, size: int, rng: Rng):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def _flat(split: Split, idx) -> tuple[np.ndarray, np.ndarray]:
    x = split.inputs[idx]
    return x.reshape(-1, x.shape[-1]), split.labels[idx].reshape(-1).astype(np.int64)


def _sgd(params, cfg: PipelineConfig, lr: float, steps: int) -> SGDPoly:
    return SGDPoly(params, base_lr=lr, max_iter=max(1, steps), power=cfg.poly_power,
                   momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def pretrain_source(source: Split, n_shared: int, cfg: PipelineConfig, rng: Rng,
                    curve: list | None = None) -> Segmenter:
    """Supervised training on source pixels with a shared-class head."""
    F = Segmenter.init(source.inputs.shape[-1], cfg.d_hidden, cfg.d_f, n_shared, rng.child("init"))
    steps = cfg.pretrain_epochs * math.ceil(len(source) / cfg.batch_grids)
    opt = _sgd(F.parameters(), cfg, cfg.seg_lr, steps)
    for epoch in range(cfg.pretrain_epochs):
        total, count = 0.0, 0
        for idx in _batches(len(source), cfg.batch_grids, rng.child("epoch", epoch)):
            x, y = _flat(source, idx)
            loss = L.seg_cross_entropy_from_logits(F.logits(x), y) / len(y)
            T.backward(loss, F.parameters())
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        if curve is not None:
            curve.append({"step": "pretrain", "epoch": epoch, "seg_ce": total / count})
    return F


@dataclass
class ConfidenceMask:
    H: int
    W: int
    selected: np.ndarray      # (H, W) bool
    confidences: np.ndarray   # (H, W) confidences from the reference model

    @property
    def count(self) -> int:
        return int(self.selected.sum())


def mask_from_confidences(conf: np.ndarray, k_pct: float) -> ConfidenceMask:
    conf = np.asarray(conf, dtype=float)
    H, W = conf.shape
    flat = conf.reshape(-1)
    sel = np.zeros(flat.size, dtype=bool)
    sel[_ranked(flat)[:keep_count(k_pct, flat.size)]] = True
    return ConfidenceMask(H, W, sel.reshape(H, W), conf)


def select_topk_confident(F: Segmenter, grid: np.ndarray, k_pct: float) -> ConfidenceMask:
    H, W, d = grid.shape
    conf = F.predict_proba(grid.reshape(-1, d)).max(axis=1).reshape(H, W)
    return mask_from_confidences(conf, k_pct)


def adapt_shared_step1(F_pre: Segmenter, source: Split, target: Split, cfg: PipelineConfig,
                       rng: Rng, k_pct: float | None = None, curve: list | None = None) -> Segmenter:
    """Fine-tune a copy of F^pre on source CE plus lambda_ent * masked target entropy.

    Masks are computed once from F^pre and stay fixed during fine-tuning.
    """
    k_pct = cfg.k_pct if k_pct is None else k_pct
    masks = np.stack([select_topk_confident(F_pre, g, k_pct).selected for g in target.inputs])
    F = F_pre.copy()
    n_iter = math.ceil(len(source) / cfg.batch_grids)
    opt = _sgd(F.parameters(), cfg, cfg.seg_lr, cfg.adapt_epochs * n_iter)
    for epoch in range(cfg.adapt_epochs):
        src_order = list(_batches(len(source), cfg.batch_grids, rng.child("src", epoch)))
        trg_rng = rng.child("trg", epoch)
        totals = {"seg_ce": 0.0, "entropy": 0.0}
        for idx in src_order:
            x, y = _flat(source, idx)
            npix = len(y)
            loss = L.seg_cross_entropy_from_logits(F.logits(x), y) / npix
            totals["seg_ce"] += loss.item()
            tidx = trg_rng.choice(len(target), len(idx), replace=False)
            if cfg.lambda_ent > 0:
                xt = target.inputs[tidx].reshape(-1, target.inputs.shape[-1])
                ent = L.entropy_from_logits(F.logits(xt), masks[tidx].reshape(-1)) / npix
                totals["entropy"] += ent.item()
                loss = loss + cfg.lambda_ent * ent
            T.backward(loss, F.parameters())
            opt.step()
        if curve is not None:
            curve.append({"step": "adapt", "epoch": epoch, **{k: v / len(src_order) for k, v in totals.items()}})
    return F


def mean_masked_entropy(F: Segmenter, target: Split, masks: np.ndarray) -> float:
    vals = []
    for g, m in zip(target.inputs, masks):
        logits = F.logits(g.reshape(-1, g.shape[-1])).detach()
        vals.append(L.entropy_from_logits(logits, m.reshape(-1)).item())
    return float(np.mean(vals))


# ---------------------------------------------------------------- step 2

@dataclass
class PseudoLabelSet:
    labels: np.ndarray       # (N, H, W) int, IGNORED where not kept
    confidence: np.ndarray   # (N, H, W) max probability of every pixel

    @property
    def kept(self) -> int:
        return int((self.labels != IGNORED).sum())


def pseudo_labels_from_probs(probs: np.ndarray, p_pct: float, oracle: np.ndarray | None = None) -> PseudoLabelSet:
    """Split-wide top-p retention; ties go to the lower (grid, pixel) index.

    With ``oracle`` the kept pixels carry their true label instead of the
    argmax.  Kept pixels whose true class is outside the current head are
    dropped.
    """
    N, H, W, C = probs.shape
    conf = probs.max(axis=-1).reshape(-1)
    source = probs.argmax(axis=-1).reshape(-1)
    if oracle is not None:
        truth = np.asarray(oracle, dtype=np.int64).reshape(-1)
        source = np.where(truth < C, truth, IGNORED)
    keep = _ranked(conf)[:keep_count(p_pct, conf.size)]
    labels = np.full(conf.size, IGNORED, dtype=np.int64)
    labels[keep] = source[keep]
    return PseudoLabelSet(labels.reshape(N, H, W), conf.reshape(N, H, W))


def pseudo_label(F: Segmenter, split: Split, p_pct: float, oracle: np.ndarray | None = None) -> PseudoLabelSet:
    N, H, W, d = split.inputs.shape
    probs = F.predict_proba(split.pixels()).reshape(N, H, W, -1)
    return pseudo_labels_from_probs(probs, p_pct, oracle)


class FeatureBank:
    """Real or generated pixel features grouped by (class, domain)."""

    def __init__(self):
        self.cells: dict[tuple[int, int], list[np.ndarray]] = {}
        self.tags: dict[tuple[int, int], list[str]] = {}

    def add(self, c: int, domain: int, feats: np.ndarray, tag: str) -> None:
        feats = np.atleast_2d(feats)
        if not len(feats):
            return
        self.cells.setdefault((c, domain), []).append(feats)
        self.tags.setdefault((c, domain), []).append(tag)

    def get(self, c: int, domain: int, tag: str | None = None) -> np.ndarray:
        chunks = [f for f, t in zip(self.cells.get((c, domain), []), self.tags.get((c, domain), []))
                  if tag is None or t == tag]
        return np.concatenate(chunks) if chunks else np.zeros((0, 0))

    def count(self, c: int | None = None, domain: int | None = None, tag: str | None = None) -> int:
        n = 0
        for (cc, dd), chunks in self.cells.items():
            if (c is None or cc == c) and (domain is None or dd == domain):
                n += sum(len(f) for f, t in zip(chunks, self.tags[(cc, dd)]) if tag is None or t == tag)
        return n

    def keys(self):
        return sorted(self.cells)


def build_feature_bank(F: Segmenter, source: Split, pseudo: PseudoLabelSet | None = None,
                       target: Split | None = None) -> FeatureBank:
    bank = FeatureBank()
    feats = F.features(source.pixels()).data
    labels = source.labels.reshape(-1).astype(np.int64)
    valid = labels != ABSENT
    for c in np.unique(labels[valid]):
        bank.add(int(c), SOURCE, feats[labels == c], "gt")
    if pseudo is not None:
        if target is None:
            raise ContractError("pseudo-labels need their target split")
        tfeats = F.features(target.pixels()).data
        tl = pseudo.labels.reshape(-1)
        for c in np.unique(tl[tl != IGNORED]):
            bank.add(int(c), TARGET, tfeats[tl == c], "pseudo")
    return bank


def _sample_rows(pop: np.ndarray, n: int, rng: Rng) -> np.ndarray:
    return pop[rng.choice(len(pop), n, replace=len(pop) < n)]


def train_generator_step2(G: Generator, D: Discriminator | None, bank: FeatureBank, embeddings: np.ndarray,
                          shared_ids, cfg: PipelineConfig, rng: Rng, domain_aware: bool = True,
                          curve: list | None = None) -> tuple[Generator, Discriminator | None]:
    """Alternate a discriminator update and a generator update per iteration.

    In domain-agnostic mode the generator only sees domain flag 0 and the
    source population, and there is no discriminator.
    """
    domains = (SOURCE, TARGET) if domain_aware else (SOURCE,)
    eligible = [c for c in shared_ids if all(bank.count(c, d) for d in domains)]
    if not eligible:
        raise ContractError("feature bank has no shared class populated in every domain")
    pops = {(c, d): bank.get(c, d) for c in eligible for d in domains}
    pooled = np.concatenate(list(pops.values()))
    G.set_output_affine(pooled.mean(axis=0), pooled.std(axis=0) + 1e-6)
    bw = L.KernelBandwidths(cfg.bandwidths)
    if cfg.auto_bandwidth:
        allreal = np.concatenate([p[:200] for p in pops.values()])
        bw = bw.scaled_to(allreal[rng.child("bw").choice(len(allreal), min(500, len(allreal)), replace=False)])
    opt_g = Adam(G.parameters(), lr=cfg.gen_lr)
    use_adv = domain_aware and D is not None and cfg.lambda_adv > 0
    opt_d = Adam(D.parameters(), lr=cfg.gen_lr) if use_adv else None
    B = cfg.gen_batch
    for it in range(cfg.gen_iters):
        r = rng.child("iter", it)
        c = eligible[int(r.integers(0, len(eligible)))]
        a = embeddings[c]
        gen = {}
        real = {}
        for d in domains:
            real[d] = _sample_rows(pops[(c, d)], B, r.child("real", d))
            gen[d] = G.forward(a, d, r.child("z", d).normal((B, G.d_z)), train_mode=True, rng=r.child("drop", d))
        rec = {"step": "generator", "iter": it, "class": c}
        if use_adv:
            d_loss = L.discriminator_loss(D, gen[SOURCE].data, gen[TARGET].data)
            T.backward(d_loss, D.parameters())
            opt_d.step()
            ps = D.forward(gen[SOURCE].data).data
            pt = D.forward(gen[TARGET].data).data
            rec["d_loss"] = d_loss.item()
            rec["d_acc"] = float(((ps > 0.5).sum() + (pt <= 0.5).sum()) / (len(ps) + len(pt)))
        g_loss = Tensor(0.0)
        for d in domains:
            g_loss = g_loss + L.gmmn_mmd(real[d], gen[d], bw, normalize=cfg.mmd_normalize)
        rec["mmd"] = g_loss.item()
        if use_adv:
            adv = L.adversarial_loss(D, gen[TARGET])
            rec["adv"] = adv.item()
            g_loss = g_loss + cfg.lambda_adv * adv
        T.backward(g_loss, G.parameters())
        opt_g.step()
        if curve is not None and (it % 50 == 0 or it == cfg.gen_iters - 1):
            curve.append(rec)
    return G, D


def synthesize_private_features(G: Generator, embeddings: np.ndarray, private_ids, domain: int,
                                n_per_class: int, rng: Rng) -> FeatureBank:
    bank = FeatureBank()
    for c in private_ids:
        z = rng.child("z", c).normal((n_per_class, G.d_z))
        bank.add(int(c), domain, G.forward(embeddings[c], domain, z, train_mode=False).data, "generated")
    return bank


# ---------------------------------------------------------------- step 3

def retrain_classifier_step3(F: Segmenter, real: FeatureBank, generated: FeatureBank, shared_ids, private_ids,
                             cfg: PipelineConfig, rng: Rng, curve: list | None = None) -> Segmenter:
    """Fresh full-width head trained on real shared and generated private features.

    Real source features are subsampled to n_gen_per_class per class so every
    class contributes equally.  F_feat is copied unchanged.
    """
    n_classes = len(shared_ids) + len(private_ids)
    F_new = F.replace_head(n_classes, rng.child("head"))
    xs, ys = [], []
    for c in shared_ids:
        pop = real.get(c, SOURCE)
        if len(pop):
            xs.append(_sample_rows(pop, cfg.n_gen_per_class, rng.child("real", c)))
            ys.append(np.full(cfg.n_gen_per_class, c))
    for c in private_ids:
        for d in (SOURCE, TARGET):
            pop = generated.get(c, d)
            if len(pop):
                xs.append(pop)
                ys.append(np.full(len(pop), c))
    X, Y = np.concatenate(xs), np.concatenate(ys).astype(np.int64)
    head = F_new.parameters("cls.")
    steps = cfg.head_epochs * math.ceil(len(X) / cfg.head_batch)
    opt = _sgd(head, cfg, cfg.head_lr, steps)
    Xt = Tensor(X)
    for epoch in range(cfg.head_epochs):
        total = 0.0
        for idx in _batches(len(X), cfg.head_batch, rng.child("epoch", epoch)):
            loss = L.seg_cross_entropy_from_logits(F_new.classify(T.take_rows(Xt, idx)), Y[idx]) / len(idx)
            T.backward(loss, head)
            opt.step()
            total += loss.item() * len(idx)
        if curve is not None:
            curve.append({"step": "head", "epoch": epoch, "seg_ce": total / len(X)})
    return F_new


def head_accuracy(F: Segmenter, X: np.ndarray, Y: np.ndarray) -> float:
    return float((F.classify(X).data.argmax(axis=1) == Y).mean())


def self_train_step3(F: Segmenter, target: Split, cfg: PipelineConfig, rng: Rng,
                     oracle: np.ndarray | None = None, curve: list | None = None) -> Segmenter:
    """Fine-tune all of F on its own top-p pseudo-labels over every class."""
    F = F.copy()
    if cfg.selftrain_epochs <= 0 or len(target) == 0:
        if len(target) == 0:
            log.warning("self-training skipped: empty target split")
        return F
    pseudo = pseudo_label(F, target, cfg.p_pct, oracle)
    if pseudo.kept == 0:
        log.warning("self-training skipped: no pseudo-labels kept")
        return F
    n_iter = math.ceil(len(target) / cfg.batch_grids)
    opt = _sgd(F.parameters(), cfg, cfg.selftrain_lr, cfg.selftrain_epochs * n_iter)
    d = target.inputs.shape[-1]
    for epoch in range(cfg.selftrain_epochs):
        total, batches = 0.0, 0
        for idx in _batches(len(target), cfg.batch_grids, rng.child("epoch", epoch)):
            lab = pseudo.labels[idx].reshape(-1)
            keep = np.flatnonzero(lab != IGNORED)
            if keep.size == 0:
                opt.iter += 1
                continue
            x = target.inputs[idx].reshape(-1, d)[keep]
            loss = L.seg_cross_entropy_from_logits(F.logits(x), lab[keep]) / keep.size
            T.backward(loss, F.parameters())
            opt.step()
            total += loss.item()
            batches += 1
        if curve is not None:
            curve.append({"step": "selftrain", "epoch": epoch, "seg_ce": total / max(1, batches)})
    return F


# ---------------------------------------------------------------- evaluation and orchestration

def evaluate(F: Segmenter, split: Split, shared_ids, private_ids) -> MetricsReport:
    cm = ConfusionMatrix(len(shared_ids) + len(private_ids))
    N, H, W, d = split.inputs.shape
    pred = F.predict_proba(split.pixels()).argmax(axis=1)
    accumulate_confusion(cm, pred, split.labels.reshape(-1))
    return gzsl_report(cm, shared_ids, private_ids)


@dataclass
class StepArtifacts:
    checkpoints: dict = field(default_factory=dict)
    log: dict = field(default_factory=dict)

    def write(self, out_dir) -> dict[str, str]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name, model in self.checkpoints.items():
            p = out / f"{name}.ckpt"
            save_checkpoint(model, p)
            paths[name] = str(p)
        return paths


def run_experiment(ds: Dataset, cfg: PipelineConfig, seed: int = 0) -> tuple[MetricsReport, StepArtifacts]:
    cfg.validate()
    spec = ds.spec
    shared, private = spec.shared_ids, spec.private_ids
    rng = Rng(seed, ("run",))
    curve: list = []
    arts = StepArtifacts()
    oracle = ds.oracle_labels() if cfg.use_oracle_labels else None

    F_pre = pretrain_source(ds.source, spec.n_shared, cfg, rng.child("pretrain"), curve)
    arts.checkpoints["F_pre"] = F_pre
    F = F_pre
    if cfg.mode != "zs3":
        k = 100.0 if cfg.mode == "zs3-uda" else cfg.k_pct
        F = adapt_shared_step1(F_pre, ds.source, ds.target_train, cfg, rng.child("adapt"), k_pct=k, curve=curve)
    arts.checkpoints["F_step1"] = F

    emb = ds.embeddings.vectors
    G = Generator.init(spec.d_a, cfg.d_z, cfg.d_f, rng.child("G"), dropout=cfg.gen_dropout)
    if cfg.domain_aware:
        pseudo = pseudo_label(F, ds.target_train, cfg.p_pct, oracle)
        bank = build_feature_bank(F, ds.source, pseudo, ds.target_train)
        D = Discriminator.init(cfg.d_f, rng.child("D"))
        G, D = train_generator_step2(G, D, bank, emb, shared, cfg, rng.child("step2"), True, curve)
        arts.checkpoints["D"] = D
        gen_domain = TARGET
        arts.log["pseudo_kept"] = pseudo.kept
    else:
        bank = build_feature_bank(F, ds.source)
        G, _ = train_generator_step2(G, None, bank, emb, shared, cfg, rng.child("step2"), False, curve)
        gen_domain = SOURCE
    arts.checkpoints["G"] = G

    generated = synthesize_private_features(G, emb, private, gen_domain, cfg.n_gen_per_class, rng.child("synth"))
    F = retrain_classifier_step3(F, bank, generated, shared, private, cfg, rng.child("head"), curve)
    arts.checkpoints["F_cls"] = F
    if cfg.domain_aware and cfg.selftrain_epochs > 0:
        F = self_train_step3(F, ds.target_train, cfg, rng.child("selftrain"), oracle, curve)
    arts.checkpoints["F_final"] = F

    report = evaluate(F, ds.target_test, shared, private)
    arts.log.update({"mode": cfg.mode, "active_losses": cfg.active_losses(), "curve": curve,
                     "bank_counts": {f"{c}:{d}": bank.count(c, d) for c, d in bank.keys()}})
    return report, arts
