"""Augmentation pipelines on geodesic subspaces.

* :func:`augment_train` warps a labeled source along a sampled geodesic.
* :func:`augment_test` segments warped copies of a test image, warps the
  predictions back and fuses them.
* :func:`oneshot_synthesize` combines the appearance of unlabeled images with
  atlas geometry sampled from atlas-to-image subspaces.
* :func:`bspline_augment` is the random cubic B-spline baseline.

Every output carries a :class:`Lineage` from which it can be regenerated
bit-exactly. Registration results are shared through a :class:`MomentumCache`.

Map convention: registering ``X`` to ``Y`` yields ``phi_inv`` with
``interpolate(X, phi_inv) ~ Y``, so ``phi_inv`` carries ``Y`` coordinates to
``X`` coordinates.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from geoflow.errors import (
    BlowUpError,
    FieldFileError,
    FoldError,
    GeoflowError,
    PipelineError,
    RegistrationError,
)
from geoflow.grid import (
    DeformationMap,
    GridSpec,
    ScalarField,
    VectorField,
    compose_maps,
    interpolate,
    jacobian_determinant,
)
from geoflow.hashing import config_hash
from geoflow.labels import LabelMap, SoftLabelField, label_fusion, warp_labels, warp_soft
from geoflow.registration import RegConfig, register
from geoflow.shooting import shoot
from geoflow.subspace import MomentumSet, Provenance, SamplerConfig, draw_sample, sample_rng

log = logging.getLogger(__name__)

Segmenter = Callable[[ScalarField], SoftLabelField]
MAX_ATTEMPTS = 20
VARIANTS = ("fluid_aug_real", "fluid_aug_real_t1", "brainstorm_real")


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class Lineage:
    """Everything needed to regenerate one output."""

    pipeline: str
    source_id: str
    target_ids: tuple[str, ...]
    lam: tuple[float, ...]
    t: float
    seed: int
    index: int
    extra: tuple[tuple[str, Any], ...] = ()

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["target_ids"] = list(self.target_ids)
        d["lam"] = list(self.lam)
        d["extra"] = {k: v for k, v in self.extra}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Lineage":
        extra = tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in d.get("extra", {}).items()))
        return cls(d["pipeline"], d["source_id"], tuple(d["target_ids"]), tuple(float(x) for x in d["lam"]),
                   float(d["t"]), int(d["seed"]), int(d["index"]), extra)

    def get(self, key: str, default=None):
        return dict(self.extra).get(key, default)


@dataclass(frozen=True, eq=False)
class AugmentedExample:
    image: ScalarField
    labels: LabelMap
    lineage: Lineage
    min_jacobian: float


@dataclass(frozen=True)
class PairFailure:
    source_id: str
    target_id: str
    message: str


@dataclass
class AugmentResult:
    examples: list[AugmentedExample]
    failures: list[PairFailure]

    def summary(self) -> dict:
        return {
            "examples": len(self.examples),
            "failed_pairs": [dataclasses.asdict(f) for f in self.failures],
        }


@dataclass(frozen=True)
class ViewDiagnostic:
    index: int
    target_ids: tuple[str, ...]
    lam: tuple[float, ...]
    t: float
    min_jacobian: float
    error: Optional[str] = None


def default_ids(n: int, prefix: str = "img") -> list[str]:
    return [f"{prefix}{i:03d}" for i in range(n)]


def _check_ids(ids: Optional[Sequence[str]], n: int, prefix: str = "img") -> list[str]:
    ids = default_ids(n, prefix) if ids is None else [str(i) for i in ids]
    if len(ids) != n or len(set(ids)) != n:
        raise PipelineError("ids must be unique, one per image")
    return ids


# ---------------------------------------------------------------------------
# parallel helper and registration cache


def parallel_map(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """``[fn(*item) for item in items]``, optionally across worker processes.

    Every item is computed by a pure function of its arguments, so results
    do not depend on ``workers`` or scheduling.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(*item) for item in items]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=workers, backend="loky")(delayed(fn)(*item) for item in items)


def _register_pair(source: ScalarField, target: ScalarField, reg: RegConfig):
    try:
        res = register(source, target, reg)
    except (GeoflowError, FloatingPointError) as exc:
        return None, f"{type(exc).__name__}: {exc}"
    last = res.energy_trace[-1]
    return (res.m0.vectors, last.regularity, last.similarity, res.reason), None


@dataclass(frozen=True, eq=False)
class CachedMomentum:
    m0: VectorField
    provenance: Provenance


class MomentumCache:
    """Registration momenta keyed by ``(source id, target id, reg-config hash)``.

    Entries live in memory and, when ``directory`` is given, on disk as a field
    file plus a JSON sidecar. Disk writes go through a temporary file and an
    atomic rename, so concurrent readers never see partial entries. Failures
    are remembered in memory so a failing pair is not retried.
    """

    def __init__(self, directory: Optional[Union[str, Path]] = None):
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._mem: dict[tuple, CachedMomentum] = {}
        self._failed: dict[tuple, str] = {}
        self._lock = threading.Lock()

    @staticmethod
    def key(source_id: str, target_id: str, reg: RegConfig) -> tuple[str, str, str]:
        return (str(source_id), str(target_id), config_hash(reg))

    def _stem(self, key) -> Path:
        return self.directory / config_hash(list(key), length=24)

    def get(self, key) -> Optional[CachedMomentum]:
        with self._lock:
            hit = self._mem.get(key)
        if hit is not None or self.directory is None:
            return hit
        from geoflow.io import read_field

        stem = self._stem(key)
        meta_path = stem.with_suffix(".json")
        if not meta_path.exists():
            return None
        try:
            meta = json.loads(meta_path.read_text())
            if tuple(meta["key"]) != tuple(key):
                return None
            m0 = read_field(stem.with_suffix(".gf"), kind="vector")
        except (OSError, ValueError, KeyError, FieldFileError):
            return None
        entry = CachedMomentum(m0, Provenance(key[1], meta["regularity"], meta["similarity"], meta["reason"]))
        with self._lock:
            self._mem[key] = entry
        return entry

    def put(self, key, entry: CachedMomentum) -> None:
        with self._lock:
            self._mem[key] = entry
        if self.directory is None:
            return
        from geoflow.io import write_field

        stem = self._stem(key)
        # field first, sidecar last: a reader only trusts entries whose sidecar exists
        write_field(stem.with_suffix(".gf"), entry.m0)
        meta = {"key": list(key), "regularity": entry.provenance.regularity,
                "similarity": entry.provenance.similarity, "reason": entry.provenance.reason}
        tmp = stem.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(meta, sort_keys=True))
        tmp.replace(stem.with_suffix(".json"))

    def failure(self, key) -> Optional[str]:
        with self._lock:
            return self._failed.get(key)

    def prefetch(self, pairs: Sequence[tuple[str, ScalarField, str, ScalarField]], reg: RegConfig,
                 workers: int = 1) -> list[PairFailure]:
        """Register every missing ``(source id, source, target id, target)`` pair."""
        todo, seen = [], set()
        for sid, src, tid, tgt in pairs:
            key = self.key(sid, tid, reg)
            if key in seen or self.failure(key) is not None or self.get(key) is not None:
                continue
            seen.add(key)
            todo.append((key, src, tgt))
        results = parallel_map(_register_pair, [(src, tgt, reg) for _, src, tgt in todo], workers)
        failures = []
        for (key, src, _), (payload, err) in zip(todo, results):
            if payload is None:
                with self._lock:
                    self._failed[key] = err
                failures.append(PairFailure(key[0], key[1], err))
                log.warning("registration %s -> %s failed: %s", key[0], key[1], err)
                continue
            m0, reg_e, sim_e, reason = payload
            self.put(key, CachedMomentum(VectorField(src.grid, m0), Provenance(key[1], reg_e, sim_e, reason)))
        return failures

    def fetch(self, source_id: str, source: ScalarField, target_id: str, target: ScalarField,
              reg: RegConfig) -> CachedMomentum:
        key = self.key(source_id, target_id, reg)
        err = self.failure(key)
        if err is None:
            hit = self.get(key)
            if hit is not None:
                return hit
            self.prefetch([(source_id, source, target_id, target)], reg)
            err = self.failure(key)
        if err is not None:
            raise RegistrationError(f"registration {source_id} -> {target_id} failed: {err}")
        return self.get(key)

    def momentum_set(self, source_id: str, source: ScalarField, targets: Sequence[tuple[str, ScalarField]],
                     reg: RegConfig) -> MomentumSet:
        entries = [self.fetch(source_id, source, tid, tgt, reg) for tid, tgt in targets]
        return MomentumSet(source_id, tuple(e.m0 for e in entries), tuple(e.provenance for e in entries))


# ---------------------------------------------------------------------------
# shared pieces


def min_jacobian(phi: DeformationMap) -> float:
    return float(np.min(jacobian_determinant(phi).values))


def _require_positive(phi: DeformationMap, what: str) -> float:
    det = min_jacobian(phi)
    if not det > 0:
        raise FoldError(f"{what}: min Jacobian determinant {det:.4g} <= 0")
    return det


def _choose_targets(rng: np.random.Generator, pool: Sequence[int], K: int) -> tuple[int, ...]:
    picks = rng.choice(len(pool), size=K, replace=False)
    return tuple(int(pool[p]) for p in picks)


# ---------------------------------------------------------------------------
# training-phase augmentation


def _train_example(mset: MomentumSet, image: ScalarField, labels: LabelMap, cfg: SamplerConfig,
                   index: int, rng_state: Optional[dict], lam, t, target_ids) -> AugmentedExample:
    rng = None
    if rng_state is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_state
    s = draw_sample(mset, cfg, index, rng=rng, lam=lam, t=t)
    lineage = Lineage("fluid_train", mset.source_id, tuple(target_ids), s.lam, s.t, cfg.rng_seed, index)
    det = _require_positive(s.phi_inv, f"training sample {index} ({lineage})")
    return AugmentedExample(interpolate(image, s.phi_inv), warp_labels(labels, s.phi_inv), lineage, det)


def _plan_train(n: int, K: int, seed: int, index: int, bad_pairs: set, ids: Sequence[str]):
    """Pick source and targets for one output, skipping pairs known to fail."""
    rng = sample_rng(seed, index)
    for _ in range(MAX_ATTEMPTS):
        c = int(rng.integers(n))
        targets = _choose_targets(rng, [j for j in range(n) if j != c], K)
        if not any((ids[c], ids[j]) in bad_pairs for j in targets):
            return c, targets, rng
    raise PipelineError(f"output {index}: no registrable source/target combination in {MAX_ATTEMPTS} draws")


def augment_train(dataset: Sequence[tuple[ScalarField, LabelMap]], n_out: int, cfg: SamplerConfig = SamplerConfig(),
                  reg: RegConfig = RegConfig(), ids: Optional[Sequence[str]] = None,
                  cache: Optional[MomentumCache] = None, workers: int = 1,
                  t: Optional[float] = None, lam: Optional[Sequence[float]] = None) -> AugmentResult:
    """Sample ``n_out`` warped copies of dataset images along geodesic subspaces.

    For output ``i`` the stream ``(cfg.rng_seed, i)`` picks a source, ``K``
    distinct targets, then the weights and time. Pairs whose registration
    fails are reported and avoided by re-drawing.
    """
    n = len(dataset)
    if n < cfg.K + 1:
        raise PipelineError(f"need at least K+1 = {cfg.K + 1} images, got {n}")
    if n_out < 0:
        raise PipelineError("n_out must be nonnegative")
    ids = _check_ids(ids, n)
    cache = cache if cache is not None else MomentumCache()
    images = [im for im, _ in dataset]
    failures: list[PairFailure] = []
    bad: set = set()
    # plans depend on which pairs fail, so iterate until every chosen pair is registered
    while True:
        plans = [_plan_train(n, cfg.K, cfg.rng_seed, i, bad, ids) for i in range(n_out)]
        pairs = {(c, j) for c, targets, _ in plans for j in targets}
        new = cache.prefetch([(ids[c], images[c], ids[j], images[j]) for c, j in sorted(pairs)], reg, workers)
        failures.extend(new)
        newly_bad = {(ids[c], ids[j]) for c, j in pairs
                     if cache.failure(cache.key(ids[c], ids[j], reg)) is not None} - bad
        if not newly_bad:
            break
        bad |= newly_bad
    jobs = []
    for i, (c, targets, rng) in enumerate(plans):
        mset = cache.momentum_set(ids[c], images[c], [(ids[j], images[j]) for j in targets], reg)
        jobs.append((mset, images[c], dataset[c][1], cfg, i, rng.bit_generator.state, lam, t,
                     tuple(ids[j] for j in targets)))
    examples = parallel_map(_train_example, jobs, workers)
    return AugmentResult(examples, failures)


def regenerate_train_example(lineage: Lineage, dataset: Sequence[tuple[ScalarField, LabelMap]],
                             cfg: SamplerConfig, reg: RegConfig, ids: Optional[Sequence[str]] = None,
                             cache: Optional[MomentumCache] = None) -> AugmentedExample:
    """Rebuild one training example from its lineage alone."""
    ids = _check_ids(ids, len(dataset))
    cache = cache if cache is not None else MomentumCache()
    pos = {sid: k for k, sid in enumerate(ids)}
    c = pos[lineage.source_id]
    targets = [(tid, dataset[pos[tid]][0]) for tid in lineage.target_ids]
    mset = cache.momentum_set(lineage.source_id, dataset[c][0], targets, reg)
    cfg = dataclasses.replace(cfg, rng_seed=lineage.seed)
    return _train_example(mset, dataset[c][0], dataset[c][1], cfg, lineage.index, None,
                          lineage.lam, lineage.t, lineage.target_ids)


# ---------------------------------------------------------------------------
# test-phase augmentation


def _test_view(mset: Optional[MomentumSet], image: ScalarField, seg: Segmenter, cfg: SamplerConfig, index: int,
               rng_state: dict, lam, t, target_ids):
    rng = np.random.default_rng()
    rng.bit_generator.state = rng_state
    if mset is None:
        # no registrations needed when the time is forced to 0: the sample is the identity
        zero = VectorField.zeros(image.grid)
        mset = MomentumSet("test", (zero,) * cfg.K)
    s = draw_sample(mset, cfg, index, rng=rng, lam=lam, t=t)
    det = _require_positive(s.phi_inv, f"test view {index}")
    soft = seg(interpolate(image, s.phi_inv))
    if soft.grid != image.grid:
        raise PipelineError("segmenter returned a field on a different grid")
    back = warp_soft(soft, s.phi)
    return back, ViewDiagnostic(index, tuple(target_ids), s.lam, s.t, det)


def augment_test(image: ScalarField, train_images: Sequence[ScalarField], seg: Segmenter, n_views: int,
                 cfg: SamplerConfig = SamplerConfig(), reg: RegConfig = RegConfig(),
                 image_id: str = "test", train_ids: Optional[Sequence[str]] = None,
                 cache: Optional[MomentumCache] = None, workers: int = 1,
                 t: Optional[float] = None, lam: Optional[Sequence[float]] = None):
    """Segment ``n_views`` geodesic warps of ``image`` and fuse the predictions.

    Each view draws a fresh set of ``K`` training targets. Predictions are
    pulled back to the original space through ``phi`` and summed; the fused
    label is the per-point argmax. Views whose registration fails are dropped.
    Returns ``(labels, diagnostics)``.
    """
    if n_views < 1:
        raise PipelineError("n_views must be >= 1")
    if len(train_images) < cfg.K:
        raise PipelineError(f"need at least K = {cfg.K} training images")
    train_ids = _check_ids(train_ids, len(train_images), "train")
    cache = cache if cache is not None else MomentumCache()
    plans = []
    for v in range(n_views):
        rng = sample_rng(cfg.rng_seed, v)
        plans.append((rng, _choose_targets(rng, list(range(len(train_images))), cfg.K)))
    identity_only = t is not None and float(t) == 0.0
    if not identity_only:
        needed = sorted({j for _, targets in plans for j in targets})
        cache.prefetch([(image_id, image, train_ids[j], train_images[j]) for j in needed], reg, workers)
    jobs, diags = [], {}
    for v, (rng, targets) in enumerate(plans):
        tids = tuple(train_ids[j] for j in targets)
        mset = None
        if not identity_only:
            try:
                mset = cache.momentum_set(image_id, image, [(train_ids[j], train_images[j]) for j in targets], reg)
            except RegistrationError as exc:
                diags[v] = ViewDiagnostic(v, tids, (), float("nan"), float("nan"), str(exc))
                continue
        jobs.append((mset, image, seg, cfg, v, rng.bit_generator.state, lam, t, tids))
    results = parallel_map(_test_view, jobs, workers)
    softs = []
    for back, diag in results:
        softs.append(back)
        diags[diag.index] = diag
    if not softs:
        raise PipelineError("every test view failed")
    return label_fusion(softs), [diags[v] for v in sorted(diags)]


@dataclass(frozen=True, eq=False)
class AtlasSegmenter:
    """Toy segmenter: register the atlas to the image and carry its labels over.

    The atlas one-hot encoding is softened to ``sharpness`` on the atlas label
    and ``(1 - sharpness) / (L - 1)`` elsewhere, so rows sum to one.
    """

    atlas: ScalarField
    atlas_labels: LabelMap
    reg: RegConfig = RegConfig()
    sharpness: float = 0.99

    def __post_init__(self):
        if self.atlas.grid != self.atlas_labels.grid:
            raise PipelineError("atlas image and labels must share a grid")
        if not 0.0 < self.sharpness <= 1.0:
            raise ValueError("sharpness must lie in (0, 1]")

    def soft_atlas(self) -> SoftLabelField:
        L = self.atlas_labels.label_count
        onehot = self.atlas_labels.one_hot()
        rest = (1.0 - self.sharpness) / (L - 1) if L > 1 else 0.0
        return SoftLabelField(self.atlas.grid, onehot * self.sharpness + (1.0 - onehot) * rest)

    def __call__(self, image: ScalarField) -> SoftLabelField:
        res = register(self.atlas, image, self.reg)
        phi_inv = shoot(res.m0, 1.0, self.reg.shoot).phi_inv
        return warp_soft(self.soft_atlas(), phi_inv)


def atlas_segmenter(atlas: ScalarField, atlas_labels: LabelMap, reg: RegConfig = RegConfig()) -> AtlasSegmenter:
    return AtlasSegmenter(atlas, atlas_labels, reg)


# ---------------------------------------------------------------------------
# one-shot synthesis


def _oneshot_example(variant: str, atlas_labels: LabelMap, appearance: ScalarField, to_atlas: DeformationMap,
                     mset: MomentumSet, cfg: SamplerConfig, index: int, rng_state: Optional[dict],
                     lam, t, lineage_fields: dict) -> AugmentedExample:
    rng = None
    if rng_state is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_state
    if variant == "brainstorm_real":
        lam, t = (1.0,) + (0.0,) * (mset.K - 1), 1.0
    elif variant == "fluid_aug_real_t1":
        t = 1.0
    s = draw_sample(mset, cfg, index, rng=rng, lam=lam, t=t)
    lineage = Lineage(variant, mset.source_id, lineage_fields["target_ids"], s.lam, s.t, cfg.rng_seed, index,
                      (("appearance_id", lineage_fields["appearance_id"]),))
    det = _require_positive(s.phi_inv, f"one-shot sample {index}")
    # (I_i o phi_i) o psi as a single resampling of I_i
    warp = compose_maps(to_atlas, s.phi_inv)
    return AugmentedExample(interpolate(appearance, warp), warp_labels(atlas_labels, s.phi_inv), lineage, det)


def oneshot_synthesize(atlas: ScalarField, atlas_labels: LabelMap, unlabeled: Sequence[ScalarField], n_out: int,
                       cfg: SamplerConfig = SamplerConfig(), reg: RegConfig = RegConfig(),
                       variant: str = "fluid_aug_real", atlas_id: str = "atlas",
                       ids: Optional[Sequence[str]] = None,
                       appearance: Optional[Sequence[tuple[str, ScalarField]]] = None,
                       cache: Optional[MomentumCache] = None, workers: int = 1,
                       t: Optional[float] = None, lam: Optional[Sequence[float]] = None) -> AugmentResult:
    """Synthesize labeled images from one atlas and unlabeled images.

    Output ``i``: appearance donor ``a`` and geometry donor ``j`` are drawn
    from stream ``(cfg.rng_seed, i)``. The donor is brought to atlas space
    with the map of its registration to the atlas, then warped by a geodesic
    sample ``psi`` from the atlas subspace spanned by ``j`` and ``K - 1``
    further unlabeled images; labels are the atlas labels warped by ``psi``.
    ``brainstorm_real`` uses the registration map of ``j`` alone (t = 1);
    ``fluid_aug_real_t1`` fixes t = 1 and samples only the weights.
    ``appearance`` overrides the donor pool (default: the unlabeled images).
    """
    if variant not in VARIANTS:
        raise PipelineError(f"unknown one-shot variant {variant!r}")
    if not unlabeled:
        raise PipelineError("one-shot synthesis needs unlabeled images")
    K = 1 if variant == "brainstorm_real" else cfg.K
    if len(unlabeled) < K:
        raise PipelineError(f"need at least K = {K} unlabeled images")
    if any(u.grid != atlas.grid for u in unlabeled):
        raise PipelineError("all images must share the atlas grid")
    ids = _check_ids(ids, len(unlabeled), "unl")
    donors = list(zip(ids, unlabeled)) if appearance is None else [(str(a), im) for a, im in appearance]
    cache = cache if cache is not None else MomentumCache()
    plans = []
    for i in range(n_out):
        rng = sample_rng(cfg.rng_seed, i)
        a = int(rng.integers(len(donors)))
        j = int(rng.integers(len(unlabeled)))
        rest = _choose_targets(rng, [k for k in range(len(unlabeled)) if k != j], K - 1) if K > 1 else ()
        plans.append((rng, a, (j,) + rest))
    pairs = [(did, dim, atlas_id, atlas) for did, dim in donors]
    pairs += [(atlas_id, atlas, ids[j], unlabeled[j]) for j in range(len(unlabeled))]
    failures = cache.prefetch(pairs, reg, workers)
    to_atlas: dict[int, DeformationMap] = {}
    jobs = []
    for i, (rng, a, geo) in enumerate(plans):
        try:
            if a not in to_atlas:
                ent = cache.fetch(donors[a][0], donors[a][1], atlas_id, atlas, reg)
                to_atlas[a] = shoot(ent.m0, 1.0, reg.shoot).phi_inv
            mset = cache.momentum_set(atlas_id, atlas, [(ids[j], unlabeled[j]) for j in geo], reg)
        except RegistrationError as exc:
            log.warning("one-shot output %d skipped: %s", i, exc)
            continue
        fields = {"target_ids": tuple(ids[j] for j in geo), "appearance_id": donors[a][0]}
        jobs.append((variant, atlas_labels, donors[a][1], to_atlas[a], mset,
                     dataclasses.replace(cfg, K=K), i, rng.bit_generator.state, lam, t, fields))
    return AugmentResult(parallel_map(_oneshot_example, jobs, workers), failures)


# ---------------------------------------------------------------------------
# random B-spline baseline


@dataclass(frozen=True)
class BSplineSetting:
    """Control points per axis and displacement standard deviation (mm)."""

    mesh: int
    sigma: float

    def __post_init__(self):
        if self.mesh < 2 or self.sigma < 0:
            raise ValueError("need mesh >= 2 and sigma >= 0")


DEFAULT_BSPLINE_SETTINGS = (BSplineSetting(10, 3.0), BSplineSetting(10, 4.0), BSplineSetting(20, 2.0))


def cubic_bspline(u: np.ndarray) -> np.ndarray:
    a = np.abs(u)
    return np.where(a < 1.0, 2.0 / 3.0 - a**2 + 0.5 * a**3, np.where(a < 2.0, (2.0 - a) ** 3 / 6.0, 0.0))


def bspline_basis(n: int, spacing: float, mesh: int) -> np.ndarray:
    """``(n, mesh)`` matrix of cubic B-spline weights; control points span the axis."""
    extent = (n - 1) * spacing
    knot = extent / (mesh - 1)
    x = np.arange(n) * spacing
    return cubic_bspline((x[:, None] - np.arange(mesh)[None, :] * knot) / knot)


def bspline_displacement(grid: GridSpec, coeffs: np.ndarray) -> np.ndarray:
    """Evaluate control-point displacements ``(*mesh, d)`` on the grid."""
    mats = [bspline_basis(n, h, m) for n, h, m in zip(grid.dims, grid.spacing, coeffs.shape[:-1])]
    if grid.ndim == 2:
        return np.einsum("ia,jb,abc->ijc", mats[0], mats[1], coeffs)
    return np.einsum("ia,jb,kc,abcd->ijkd", mats[0], mats[1], mats[2], coeffs)


def random_bspline_map(grid: GridSpec, setting: BSplineSetting, rng: np.random.Generator) -> DeformationMap:
    coeffs = rng.normal(0.0, setting.sigma, size=(setting.mesh,) * grid.ndim + (grid.ndim,))
    return DeformationMap(grid, grid.points() + bspline_displacement(grid, coeffs))


def bspline_augment(dataset: Sequence[tuple[ScalarField, LabelMap]], n_out: int,
                    settings: Sequence[BSplineSetting] = DEFAULT_BSPLINE_SETTINGS, rng_seed: int = 0,
                    ids: Optional[Sequence[str]] = None) -> list[AugmentedExample]:
    """Warp random sources by random cubic B-spline transforms.

    Per output, stream ``(rng_seed, i)`` picks a source and one of
    ``settings``, then draws control-point displacements. B-spline maps are
    not guaranteed invertible; the minimum Jacobian determinant is recorded
    rather than enforced.
    """
    if not dataset:
        raise PipelineError("empty dataset")
    settings = [s if isinstance(s, BSplineSetting) else BSplineSetting(*s) for s in settings]
    if not settings:
        raise PipelineError("need at least one B-spline setting")
    ids = _check_ids(ids, len(dataset))
    out = []
    for i in range(n_out):
        rng = sample_rng(rng_seed, i)
        c = int(rng.integers(len(dataset)))
        k = int(rng.integers(len(settings)))
        image, labels = dataset[c]
        phi_inv = random_bspline_map(image.grid, settings[k], rng)
        lineage = Lineage("bspline", ids[c], (), (), 1.0, rng_seed, i,
                          (("mesh", settings[k].mesh), ("sigma", settings[k].sigma)))
        out.append(AugmentedExample(interpolate(image, phi_inv), warp_labels(labels, phi_inv), lineage,
                                    min_jacobian(phi_inv)))
    return out
