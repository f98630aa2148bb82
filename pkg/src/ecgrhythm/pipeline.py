"""End-to-end orchestration: evidence cache, model bundles, cross-validation.

Per-record work (filtering, detection, delineation, interpretation, features)
is pure and cached once per orientation; fold-dependent stages (the inversion
classifier, GBT, RNNs, stacker) reuse the cache, so cross-validation pays the
signal-processing cost once. Records flagged as inverted by a fold's
classifier get their negated-orientation products computed lazily.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import conduction, preprocess
from .config import CANONICAL_FS, CLASSES, PipelineConfig
from .ensemble import LdaModel, average_probs, fit_lda, predict_stacked, stack_features
from .errors import DegenerateDataError, EvidenceError
from .evaluation import ConfusionMatrix, CvReport, challenge_score, stratified_folds
from .features import (
    BeatFeatureSequence,
    GlobalFeatures,
    N_BEAT,
    beat_features,
    global_features,
)
from .gbt import GbtModel, train_gbt
from .interpretation import Interpretation, abstract_rhythms
from .preprocess import LogRegModel, detect_inversion, inversion_features, train_logreg
from .rnn import RnnModel, predict_proba, train_rnn
from .signal_io import Manifest, Record, load_record, resample


def _sub_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) & 0x7FFFFFFF for p in parts]).generate_state(1)[0])


@dataclass
class RecordProducts:
    interpretation: Interpretation
    globals: GlobalFeatures
    beat_rows: np.ndarray  # (n, 22); single zero row when evidence is insufficient


@dataclass
class RecordEvidence:
    record_id: str
    label: str | None
    record: Record  # baseline-filtered, canonical rate
    inv_features: np.ndarray
    inv_features_neg: np.ndarray
    upright: RecordProducts
    negated: RecordProducts | None = None


def _conduction_pass(rec: Record, config: PipelineConfig):
    try:
        peaks = conduction.detect_qrs(rec, config.conduction)
    except EvidenceError:
        peaks = np.zeros(0, dtype=np.int64)
    beats = conduction.delineate_record(rec, peaks, config.conduction)
    template = conduction.tag_beats(rec, beats, config.conduction)
    return beats, template


def _products(rec: Record, beats, template, config: PipelineConfig) -> RecordProducts:
    itp = abstract_rhythms(rec, beats, config.interpretation, config.conduction, template)
    gf = global_features(rec, itp, config.features)
    if len(itp.beats) >= 3:
        rows = beat_features(rec, itp, config.features).rows
    else:
        rows = np.zeros((1, N_BEAT))
    return RecordProducts(interpretation=itp, globals=gf, beat_rows=rows)


def _neutral_inv_features() -> np.ndarray:
    v = np.zeros(preprocess.N_INVERSION_FEATURES)
    v[1] = v[2] = v[11] = 0.5
    return v


def _inv_features(rec: Record, beats, config: PipelineConfig) -> np.ndarray:
    if not beats:
        return _neutral_inv_features()
    return inversion_features(rec, beats, config.preprocess)


def prepare_record(rec: Record, config: PipelineConfig) -> RecordEvidence:
    """All fold-independent products for one record (pure, parallel-safe)."""
    rec = resample(rec, CANONICAL_FS)
    filtered = preprocess.baseline_filter(rec, config.preprocess)
    beats, template = _conduction_pass(filtered, config)
    inv = _inv_features(filtered, beats, config)
    negated = filtered.negated()
    neg_beats, _ = _conduction_pass(negated, config)
    inv_neg = _inv_features(negated, neg_beats, config)
    upright = _products(filtered, beats, template, config)
    return RecordEvidence(
        record_id=rec.id, label=rec.label, record=filtered,
        inv_features=inv, inv_features_neg=inv_neg, upright=upright)


def _prepare_from_path(args) -> RecordEvidence:
    path, label, config_json = args
    config = PipelineConfig.from_json(config_json)
    rec = load_record(path, manifest_label=label)
    return prepare_record(rec, config)


@dataclass
class EvidenceCache:
    items: list[RecordEvidence] = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    def labels(self) -> list[str | None]:
        return [ev.label for ev in self.items]

    def product(self, i: int, inverted: bool, config: PipelineConfig) -> RecordProducts:
        ev = self.items[i]
        if not inverted:
            return ev.upright
        if ev.negated is None:
            negated = ev.record.negated()
            beats, template = _conduction_pass(negated, config)
            ev.negated = _products(negated, beats, template, config)
        return ev.negated


def build_cache(manifest: Manifest, config: PipelineConfig, jobs: int = 1) -> EvidenceCache:
    tasks = [(str(e.path), e.label, config.to_json()) for e in manifest]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            items = list(pool.map(_prepare_from_path, tasks, chunksize=8))
    else:
        items = [_prepare_from_path(t) for t in tasks]
    return EvidenceCache(items=items)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainedBundle:
    logreg: LogRegModel
    gbt: GbtModel
    rnns: list[RnnModel]
    lda: LdaModel
    config_hash: str = ""

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.logreg.save(out / "inversion_logreg.json")
        self.gbt.save(out / "gbt.json")
        for i, m in enumerate(self.rnns):
            m.save(out / f"rnn_{i}.bin")
        self.lda.save(out / "lda.json")
        meta = {"version": 1, "config_hash": self.config_hash, "classes": list(CLASSES),
                "n_rnns": len(self.rnns)}
        (out / "bundle.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, in_dir) -> "TrainedBundle":
        src = Path(in_dir)
        meta = json.loads((src / "bundle.json").read_text(encoding="utf-8"))
        rnns = [RnnModel.load(src / f"rnn_{i}.bin") for i in range(int(meta["n_rnns"]))]
        return cls(
            logreg=LogRegModel.load(src / "inversion_logreg.json"),
            gbt=GbtModel.load(src / "gbt.json"),
            rnns=rnns,
            lda=LdaModel.load(src / "lda.json"),
            config_hash=meta.get("config_hash", ""),
        )


def train_inversion_model(cache: EvidenceCache, idx, config: PipelineConfig, seed: int) -> LogRegModel:
    """Upright vs negated orientation classifier over the training records."""
    X = np.vstack([cache.items[i].inv_features for i in idx]
                  + [cache.items[i].inv_features_neg for i in idx])
    y = np.concatenate([np.zeros(len(idx)), np.ones(len(idx))])
    return train_logreg(X, y, config.preprocess.logreg_l2, seed, config.preprocess)


def _oriented_products(cache, idx, logreg, config):
    out = []
    for i in idx:
        _, inverted = detect_inversion(logreg, cache.items[i].inv_features, config.preprocess)
        out.append(cache.product(i, inverted, config))
    return out


def _label_indices(cache, idx):
    labels = []
    for i in idx:
        lab = cache.items[i].label
        if lab is None:
            raise DegenerateDataError(f"record {cache.items[i].record_id} has no label")
        labels.append(CLASSES.index(lab))
    return np.asarray(labels, dtype=np.int64)


def train_bundle(cache: EvidenceCache, idx, config: PipelineConfig, seed: int) -> TrainedBundle:
    """Train the full bundle on a training partition with out-of-fold stacking."""
    idx = np.asarray(list(idx), dtype=np.int64)
    y = _label_indices(cache, idx)
    logreg = train_inversion_model(cache, idx, config, _sub_seed(seed, 101))
    products = _oriented_products(cache, idx, logreg, config)
    X = np.vstack([p.globals.v for p in products])
    seqs = [p.beat_rows for p in products]
    n_rnns = config.ensemble.n_rnns

    # out-of-fold predictions for the stacker
    inner = stratified_folds([CLASSES[c] for c in y], k=config.ensemble.stack_folds,
                             seed=_sub_seed(seed, 202))
    Z = np.zeros((idx.size, 6))
    z_filled = np.zeros(idx.size, dtype=bool)
    for f in range(config.ensemble.stack_folds):
        hold = np.flatnonzero(inner == f)
        rest = np.flatnonzero(inner != f)
        assert not np.intersect1d(hold, rest).size, "stacking leakage: splits overlap"
        gbt_f = train_gbt(X[rest], y[rest], config.gbt, _sub_seed(seed, 303, f))
        rnn_probs = []
        for r_i in range(n_rnns):
            m, _ = train_rnn([(seqs[j], int(y[j])) for j in rest], config.rnn,
                             _sub_seed(seed, 404, f, r_i))
            rnn_probs.append(predict_proba(m, [seqs[j] for j in hold]))
        gbt_probs = gbt_f.predict_many(X[hold])
        avg = np.mean(rnn_probs, axis=0)
        for row, j in enumerate(hold):
            Z[j] = stack_features(gbt_probs[row], avg[row])
        z_filled[hold] = True
    assert z_filled.all(), "stacking rows incomplete"
    lda = fit_lda(Z, y, config.ensemble.shrink)

    # refit base models on the full partition
    gbt = train_gbt(X, y, config.gbt, _sub_seed(seed, 505))
    rnns = []
    for r_i in range(n_rnns):
        m, _ = train_rnn([(s, int(c)) for s, c in zip(seqs, y)], config.rnn,
                         _sub_seed(seed, 606, r_i))
        rnns.append(m)
    return TrainedBundle(logreg=logreg, gbt=gbt, rnns=rnns, lda=lda,
                         config_hash=config.config_hash())


@dataclass
class RecordDecision:
    record_id: str
    gbt_probs: np.ndarray
    rnn_probs: np.ndarray  # averaged over the RNNs
    stacked_probs: np.ndarray
    label: str  # stacked argmax


def classify_cached(cache: EvidenceCache, idx, bundle: TrainedBundle,
                    config: PipelineConfig) -> list[RecordDecision]:
    idx = list(idx)
    products = _oriented_products(cache, idx, bundle.logreg, config)
    X = np.vstack([p.globals.v for p in products])
    seqs = [p.beat_rows for p in products]
    gbt_probs = bundle.gbt.predict_many(X)
    per_rnn = [predict_proba(m, seqs) for m in bundle.rnns]
    out = []
    for row, i in enumerate(idx):
        rnn_list = [pr[row] for pr in per_rnn]
        stacked, cls = predict_stacked(gbt_probs[row], rnn_list, bundle.lda)
        out.append(RecordDecision(
            record_id=cache.items[i].record_id,
            gbt_probs=gbt_probs[row],
            rnn_probs=average_probs(rnn_list),
            stacked_probs=stacked,
            label=CLASSES[cls],
        ))
    return out


def cross_validate(manifest: Manifest, config: PipelineConfig | None = None,
                   seed: int | None = None, jobs: int = 1,
                   cache: EvidenceCache | None = None) -> CvReport:
    """Stratified k-fold evaluation of GBT, averaged RNNs, and the stacker."""
    config = config or PipelineConfig()
    seed = config.seed if seed is None else seed
    if cache is None:
        cache = build_cache(manifest, config, jobs)
    labels = cache.labels()
    if any(lab is None for lab in labels):
        raise DegenerateDataError("cross-validation needs labels for every record")
    folds = stratified_folds(labels, k=config.evaluation.cv_folds, seed=_sub_seed(seed, 7))

    report = CvReport(fold_scores={m: [] for m in ("gbt", "rnn", "stacker")},
                      config_hash=config.config_hash(), seed=seed)
    for f in range(config.evaluation.cv_folds):
        test_idx = np.flatnonzero(folds == f)
        train_idx = np.flatnonzero(folds != f)
        bundle = train_bundle(cache, train_idx, config, _sub_seed(seed, 8, f))
        decisions = classify_cached(cache, test_idx, bundle, config)
        ref = [labels[i] for i in test_idx]
        for method in ("gbt", "rnn", "stacker"):
            if method == "gbt":
                pred = [CLASSES[int(np.argmax(d.gbt_probs))] for d in decisions]
            elif method == "rnn":
                pred = [CLASSES[int(np.argmax(d.rnn_probs))] for d in decisions]
            else:
                pred = [d.label for d in decisions]
            cm = ConfusionMatrix.from_labels(ref, pred)
            report.fold_scores[method].append(challenge_score(cm)[4])
    return report


def classify_manifest(manifest: Manifest, bundle: TrainedBundle,
                      config: PipelineConfig | None = None, jobs: int = 1,
                      cache: EvidenceCache | None = None) -> list[RecordDecision]:
    config = config or PipelineConfig()
    if cache is None:
        cache = build_cache(manifest, config, jobs)
    return classify_cached(cache, range(len(cache)), bundle, config)
