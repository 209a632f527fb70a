"""Desk-scale experiments on synthetic faces.

Each experiment takes a root seed, derives every sub-seed with
:func:`derive_seed`, and returns plain numbers so results can be tabulated
or asserted on.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .balance import AugmentationConfig, balance, identity_manifest, materialize
from .config import ExperimentConfig, derive_seed
from .data import Dataset, SyntheticConfig, generate_synthetic
from .eval import NormalisationRule, nme_batch
from .geometry import Crop
from .net import LandmarkRegressor
from .pipeline import TwoStageLocalizer
from .shapes import ShapeModel, from_vector, procrustes_align, wrap_angle

logger = logging.getLogger(__name__)

SWEEP_W = (4, 6, 8, 10, 12, 14)
SWEEP_EPSILON = (0.5, 1, 2, 3)


def regressor_from_config(cfg: ExperimentConfig, loss=None, seed=0, **overrides) -> LandmarkRegressor:
    kind = loss or cfg["loss"]["kind"]
    lr, lr_final = cfg.lr_schedule(kind)
    units = cfg["network"]["coord_units"]
    params = dict(
        layers=cfg["network"]["layers"],
        loss=kind,
        w=cfg["loss"]["w"],
        epsilon=cfg["loss"]["epsilon"],
        coord_scale="pixels" if units == "pixels" else 1.0,
        lr=lr,
        lr_final=lr_final,
        momentum=cfg["train"]["momentum"],
        weight_decay=cfg["train"]["weight_decay"],
        batch_size=cfg["train"]["batch_size"],
        n_iter=cfg["train"]["iterations"],
        random_state=seed,
    )
    params.update(overrides)
    return LandmarkRegressor(**params)


def synthetic_from_config(cfg: ExperimentConfig, n_samples, seed, **overrides) -> Dataset:
    d = cfg["dataset"]
    syn = SyntheticConfig(
        n_samples=n_samples,
        n_landmarks=d["n_landmarks"],
        image_size=d["image_size"],
        pose_distribution=d["pose_distribution"],
        roll_range=d["roll_range"],
        bbox_mode=d["bbox_mode"],
        seed=seed,
    )
    return generate_synthetic(replace(syn, **overrides))


def augmentation_from_config(cfg: ExperimentConfig) -> AugmentationConfig:
    p = cfg["pdb"]
    return AugmentationConfig(
        max_rotation=p["max_rotation"],
        flip_probability=p["flip_probability"],
        max_jitter=p["max_jitter"],
        blur_probability=p["blur_probability"],
        blur_sigma=p["blur_sigma"],
    )


def crops(dataset: Dataset, size):
    return materialize(dataset, identity_manifest(dataset), size)


def eval_nmes(est: LandmarkRegressor, X, Y) -> np.ndarray:
    """Per-sample NME for crop-normalised targets (box side is 1)."""
    pred = from_vector(est.predict(X))
    return nme_batch(pred, from_vector(Y), NormalisationRule("bbox"), [(0, 0, 1, 1)] * len(Y))


# --------------------------------------------------------------------------
# loss comparison


def loss_comparison(seed, losses=("l2", "l1", "smooth_l1", "wing"), cfg=None,
                    n_train=2000, n_test=500, iterations=2000) -> dict:
    """Mean test NME per loss; data and initialisation are shared across losses."""
    cfg = cfg or ExperimentConfig()
    size = cfg["network"]["input_size"]
    train_set = synthetic_from_config(cfg, n_train, derive_seed(seed, "train-data"))
    test_set = synthetic_from_config(cfg, n_test, derive_seed(seed, "test-data"))
    Xtr, Ytr = crops(train_set, size)
    Xte, Yte = crops(test_set, size)
    init = derive_seed(seed, "init") % 2**31
    out = {}
    for kind in losses:
        est = regressor_from_config(cfg, kind, seed=init, n_iter=iterations).fit(Xtr, Ytr)
        out[kind] = float(np.mean(eval_nmes(est, Xte, Yte)))
        logger.info("seed %s loss %s NME %.5f", seed, kind, out[kind])
    return out


@dataclass
class SweepResult:
    ws: tuple
    epsilons: tuple
    nme: np.ndarray  # (len(epsilons), len(ws))

    def best(self):
        i, j = np.unravel_index(np.argmin(self.nme), self.nme.shape)
        return self.epsilons[i], self.ws[j]

    def rows(self):
        for i, eps in enumerate(self.epsilons):
            for j, w in enumerate(self.ws):
                yield w, eps, float(self.nme[i, j])

    def table(self) -> str:
        best = self.best()
        head = "eps\\w".rjust(7) + "".join(f"{w:>10g}" for w in self.ws)
        lines = [head]
        for i, eps in enumerate(self.epsilons):
            cells = []
            for j, w in enumerate(self.ws):
                mark = "*" if (eps, w) == best else " "
                cells.append(f"{self.nme[i, j] * 100:9.4f}{mark}")
            lines.append(f"{eps:>7g}" + "".join(cells))
        lines.append("(mean NME x 1e-2; * marks the best cell)")
        return "\n".join(lines)

    def csv(self) -> str:
        lines = ["w,epsilon,nme"]
        lines += [f"{float(w)!r},{float(eps)!r},{v!r}" for w, eps, v in self.rows()]
        return "\n".join(lines) + "\n"


def wing_sweep(seed, ws=SWEEP_W, epsilons=SWEEP_EPSILON, cfg=None, n_train=2000, n_test=500,
               iterations=2000) -> SweepResult:
    """Mean test NME of the Wing loss over a (w, epsilon) grid."""
    cfg = cfg or ExperimentConfig()
    size = cfg["network"]["input_size"]
    train_set = synthetic_from_config(cfg, n_train, derive_seed(seed, "train-data"))
    test_set = synthetic_from_config(cfg, n_test, derive_seed(seed, "test-data"))
    Xtr, Ytr = crops(train_set, size)
    Xte, Yte = crops(test_set, size)
    init = derive_seed(seed, "init") % 2**31
    grid = np.empty((len(epsilons), len(ws)))
    for i, eps in enumerate(epsilons):
        for j, w in enumerate(ws):
            est = regressor_from_config(cfg, "wing", seed=init, w=float(w), epsilon=float(eps),
                                        n_iter=iterations).fit(Xtr, Ytr)
            grid[i, j] = float(np.mean(eval_nmes(est, Xte, Yte)))
    return SweepResult(tuple(ws), tuple(epsilons), grid)


# --------------------------------------------------------------------------
# pose-based data balancing


@dataclass
class PDBResult:
    minority_nme_plain: float
    minority_nme_pdb: float
    overall_nme_plain: float
    overall_nme_pdb: float
    bin_counts: np.ndarray
    n_duplicates: int
    n_minority_test: int


def pdb_comparison(seed, cfg=None, n_train=2000, n_test=600, iterations=2000, bins=9,
                   minority_threshold=0.3, loss="wing") -> PDBResult:
    """Train with and without PDB on a skewed pose distribution.

    The test set has uniform pose; the minority slice is test samples with
    latent pose above ``minority_threshold`` (the sparse tail of training).
    """
    cfg = cfg or ExperimentConfig()
    size = cfg["network"]["input_size"]
    train_set = synthetic_from_config(cfg, n_train, derive_seed(seed, "pdb-train"),
                                      pose_distribution="skewed")
    test_set = synthetic_from_config(cfg, n_test, derive_seed(seed, "pdb-test"),
                                     pose_distribution="uniform")
    model = ShapeModel(pose_component=cfg["pdb"]["pose_component"]).fit(train_set.shapes)
    manifest = balance(train_set, model, bins, rng_seed=derive_seed(seed, "pdb-balance") % 2**31,
                       fill=cfg["pdb"]["fill"], augmentation=augmentation_from_config(cfg))
    Xte, Yte = crops(test_set, size)
    minority = test_set.latent_pose > minority_threshold
    init = derive_seed(seed, "init") % 2**31

    results = {}
    for name, man in (("plain", identity_manifest(train_set)), ("pdb", manifest)):
        X, Y = materialize(train_set, man, size)
        est = regressor_from_config(cfg, loss, seed=init, n_iter=iterations).fit(X, Y)
        errs = eval_nmes(est, Xte, Yte)
        results[name] = (float(np.mean(errs[minority])), float(np.mean(errs)))
        logger.info("seed %s %s minority NME %.5f overall %.5f", seed, name, *results[name])
    return PDBResult(
        results["plain"][0], results["pdb"][0], results["plain"][1], results["pdb"][1],
        manifest.bin_counts(), manifest.n_duplicates, int(minority.sum()),
    )


# --------------------------------------------------------------------------
# two-stage localisation

TWO_STAGE_DATA = dict(image_size=64, roll_range=25.0, bbox_mode="detector", face_scale=0.4,
                      translation_jitter=0.04, bbox_margin=0.35)


@dataclass
class TwoStageResult:
    stage1_nme: float
    two_stage_nme: float
    rotation_residual_deg: np.ndarray = field(repr=False)
    stage1_sample_nme: np.ndarray = field(repr=False)
    roundtrip_error: float = 0.0
    roll_error_deg: np.ndarray = field(default=None, repr=False)


def two_stage_comparison(seed, cfg=None, n_train=2000, n_test=400, iterations=2000,
                         loss="wing") -> TwoStageResult:
    """Stage-1 vs two-stage NME on faces with in-plane rotation.

    NME uses the detector box width.  Also reports, per test sample, the
    rotation (deg) still separating the true shape inside the stage-2 crop
    from the mean shape, the error of the estimated roll against the
    generator's roll, and the worst crop round-trip error in pixels.
    """
    cfg = cfg or ExperimentConfig()
    size1 = cfg["network"]["input_size"]
    size2 = cfg["pipeline"]["input_size2"]
    train_set = synthetic_from_config(cfg, n_train, derive_seed(seed, "2s-train"), **TWO_STAGE_DATA)
    test_set = synthetic_from_config(cfg, n_test, derive_seed(seed, "2s-test"), **TWO_STAGE_DATA)
    init = derive_seed(seed, "init") % 2**31
    loc = TwoStageLocalizer(
        stage1=regressor_from_config(cfg, loss, seed=init, n_iter=iterations),
        stage2=regressor_from_config(cfg, loss, seed=init + 1, n_iter=iterations),
        input_size1=size1, input_size2=size2, margin=cfg["pipeline"]["margin"],
        stage2_rotation=cfg["pipeline"]["stage2_rotation"],
        random_state=derive_seed(seed, "2s-stage2") % 2**31,
    ).fit(train_set)

    detailed = loc.predict_detailed(test_set.images, test_set.bboxes)
    rule = NormalisationRule("bbox")
    s1 = nme_batch([r.stage1 for r in detailed], test_set.shapes, rule, test_set.bboxes)
    s2 = nme_batch([r.landmarks for r in detailed], test_set.shapes, rule, test_set.bboxes)

    residual, roll_error = [], []
    worst = 0.0
    for r, truth, roll in zip(detailed, test_set.shapes, test_set.roll):
        crop = r.correction.crop()
        local = crop.to_crop(truth)
        worst = max(worst, float(np.max(np.abs(crop.to_image(local) - truth))))
        # same rotation measure the correction uses: Procrustes onto the mean
        _, t = procrustes_align(local * size2, loc.mean_)
        residual.append(abs(np.degrees(t.rotation)))
        roll_error.append(abs(np.degrees(wrap_angle(roll - r.correction.rotation))))
    return TwoStageResult(float(np.mean(s1)), float(np.mean(s2)), np.array(residual), s1, worst,
                          np.array(roll_error))


def crop_roundtrip_error(dataset: Dataset) -> float:
    """Worst |to_image(to_crop(p)) - p| over all landmarks and detector boxes."""
    worst = 0.0
    for shape, box in zip(dataset.shapes, dataset.bboxes):
        crop = Crop.from_bbox(box)
        worst = max(worst, float(np.max(np.abs(crop.to_image(crop.to_crop(shape)) - shape))))
    return worst
