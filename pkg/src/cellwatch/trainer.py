"""Splitting, training loops, grid search, and the final test protocol.

The experiment pipeline for one table row is: split the dataset 70/15/15,
prepare the training inputs for the requested variant (raw, or upsampled
with replacement plus augmentation, applied strictly after the split),
grid-search hyperparameters by validation ROC-AUC, then retrain the best
configuration from fresh initial weights on train+validation and score the
untouched test split.

Every random choice (split permutation, epoch shuffles, combo seeds,
augmentation streams) is derived from named seed streams, so a root seed
reproduces the whole table bit for bit. Grid combos get their seeds from
the combo's own content, which makes results independent of enumeration
order.
"""

import json
import time
from dataclasses import dataclass, replace, field

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, augment_sample, upsample_with_replacement
from .errors import DivergedError, NumericsError
from .fusion import DEFAULT_IR_RANGE_C, INPUT_TYPES, batch_to_input, sample_to_input
from .metrics import pr_auc, pr_curve, roc_auc, roc_curve
from .models import FAMILY_NAMES, ModelSpec, VIT_FUSION_MESSAGE, build_model
from .optim import make_optimizer
from .seeding import derive_seed, spawn_rng

VARIANTS = ("raw", "upaug")

# Table rows: (family, input type, variant). The shallow CNN runs both
# variants; the deeper families run only the enlarged variant; the ViT
# cannot take the 6-channel fusion input.
EXPERIMENT_MATRIX = (
    ("cnn", "optical", "raw"),
    ("cnn", "infrared", "raw"),
    ("cnn", "fusion", "raw"),
    ("cnn", "optical", "upaug"),
    ("cnn", "infrared", "upaug"),
    ("cnn", "fusion", "upaug"),
    ("resnet", "optical", "upaug"),
    ("resnet", "infrared", "upaug"),
    ("resnet", "fusion", "upaug"),
    ("vit", "optical", "upaug"),
    ("vit", "infrared", "upaug"),
)


@dataclass
class SplitAssignment:
    train_ids: list
    val_ids: list
    test_ids: list
    fractions: tuple = (0.70, 0.15, 0.15)
    seed: int = 0

    def tag_of(self):
        tags = {}
        for name, ids in (("train", self.train_ids), ("val", self.val_ids), ("test", self.test_ids)):
            for i in ids:
                tags[i] = name
        return tags


def split_dataset(dataset, fractions=(0.70, 0.15, 0.15), seed=0):
    """Seeded 70/15/15 partition; floor sizes, remainder goes to test."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError(f"need three non-negative fractions, got {fractions}")
    n = len(dataset)
    ids = [s.sample_id for s in dataset.samples]
    perm = spawn_rng(seed, "split").permutation(n)
    n_train = int(np.floor(fractions[0] * n))
    n_val = int(np.floor(fractions[1] * n))
    shuffled = [ids[i] for i in perm]
    return SplitAssignment(
        train_ids=shuffled[:n_train],
        val_ids=shuffled[n_train : n_train + n_val],
        test_ids=shuffled[n_train + n_val :],
        fractions=tuple(fractions),
        seed=seed,
    )


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    warmup_epochs: float = 1.0
    variant: str = "raw"
    input_type: str = "optical"
    upsample_factor: int = 2
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.input_type not in INPUT_TYPES:
            raise ValueError(f"input_type must be one of {INPUT_TYPES}, got {self.input_type!r}")
        if self.upsample_factor < 1:
            raise ValueError("upsample_factor must be >= 1")
        return self


def check_family_input(family, input_type):
    """Reject invalid (family, input) pairs before any compute."""
    if family == "vit" and input_type == "fusion":
        raise ValueError(VIT_FUSION_MESSAGE)


def train(model, config, inputs, labels):
    """Run the epochs x batches loop in place; returns per-epoch mean loss.

    A non-finite loss or gradient aborts with DivergedError carrying the
    optimizer step index at which it surfaced.
    """
    config.validate()
    n = inputs.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    labels = np.asarray(labels)
    opt = make_optimizer(config.optimizer, model.parameters(), config.lr, config.momentum)
    # Linear warmup guards the kaiming-scale init: small-batch Adam moves
    # every coordinate by roughly +-lr per step, which can kill every relu
    # in a small net within the first epoch if the full rate hits at once.
    batches = -(-n // config.batch_size)
    warmup_steps = int(round(config.warmup_epochs * batches))
    losses = []
    step = 0
    for epoch in range(config.epochs):
        perm = spawn_rng(config.seed, "epoch", epoch).permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            if step < warmup_steps:
                opt.lr = config.lr * (step + 1) / warmup_steps
            else:
                opt.lr = config.lr
            idx = perm[lo : lo + config.batch_size]
            xb = T.Tensor(inputs[idx], dtype=model.dtype)
            yb = labels[idx]
            try:
                # Overflow is handled by finiteness checks, not warnings.
                with np.errstate(over="ignore", invalid="ignore"):
                    loss = T.cross_entropy(model.forward(xb).logits, yb)
                    loss.backward()
                    opt.step()
            except NumericsError as e:
                raise DivergedError(step, f"diverged at step {step}: {e}") from e
            opt.zero_grad()
            total += float(loss.data) * len(idx)
            step += 1
        losses.append(total / n)
    return losses


def predict_scores(model, inputs, batch_size=64):
    """Positive-class probabilities, computed without building graphs."""
    out = []
    with T.no_grad():
        for lo in range(0, inputs.shape[0], batch_size):
            logits = model.forward(T.Tensor(inputs[lo : lo + batch_size], dtype=model.dtype)).logits
            z = logits.data
            m = z.max(axis=1, keepdims=True)
            e = np.exp(z - m)
            out.append((e[:, 1] / e.sum(axis=1)).astype(np.float64))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# data preparation per variant
# ---------------------------------------------------------------------------


def augmented_inputs(dataset, factor, aug_config, input_type, ir_range=DEFAULT_IR_RANGE_C):
    """Upsample with replacement, augment each copy, and stream straight
    into model-input arrays (the augmented pixels are never all held as
    samples at once)."""
    up, _ = upsample_with_replacement(dataset, factor * len(dataset), aug_config.seed)
    n = len(up)
    first = sample_to_input(
        augment_sample(up.samples[0], aug_config, spawn_rng(aug_config.seed, "augment", 0)),
        input_type,
        ir_range,
    )
    inputs = np.empty((n,) + first.shape, dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    inputs[0] = first
    labels[0] = up.samples[0].label
    for i in range(1, n):
        s = augment_sample(up.samples[i], aug_config, spawn_rng(aug_config.seed, "augment", i))
        inputs[i] = sample_to_input(s, input_type, ir_range)
        labels[i] = s.label
    return inputs, labels


def prepare_inputs(dataset, ids, config, aug_config, ir_range=DEFAULT_IR_RANGE_C):
    """Model inputs for the given sample ids under the config's variant."""
    sub = dataset.subset(ids)
    if config.variant == "raw":
        labels = np.array([s.label for s in sub.samples], dtype=np.int64)
        return batch_to_input(sub.samples, config.input_type, ir_range), labels
    return augmented_inputs(sub, config.upsample_factor, aug_config, config.input_type, ir_range)


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------

_SPEC_FIELDS = set(ModelSpec.__dataclass_fields__)
_CONFIG_FIELDS = set(TrainConfig.__dataclass_fields__)


def _canonical(combo):
    return json.dumps(combo, sort_keys=True)


def enumerate_grid(grid):
    """Cartesian combos of a {name: [candidates]} grid in a canonical
    order that does not depend on key order or candidate order."""
    if not grid:
        raise ValueError("grid must name at least one hyperparameter")
    names = sorted(grid)
    combos = [{}]
    for name in names:
        if not grid[name]:
            raise ValueError(f"empty candidate list for {name!r}")
        combos = [dict(c, **{name: v}) for c in combos for v in grid[name]]
    return sorted(combos, key=_canonical)


def apply_combo(spec, config, combo):
    """Override ModelSpec / TrainConfig fields by hyperparameter name."""
    spec_over, config_over = {}, {}
    for k, v in combo.items():
        if isinstance(v, list):
            v = tuple(v)
        if k in _SPEC_FIELDS:
            spec_over[k] = v
        elif k in _CONFIG_FIELDS:
            config_over[k] = v
        else:
            raise ValueError(f"unknown hyperparameter {k!r}")
    return replace(spec, **spec_over), replace(config, **config_over)


def grid_search(spec, config, grid, train_inputs, train_labels, val_inputs, val_labels):
    """Train one model per combo, score on validation, pick the winner.

    Returns (best spec, best config, best combo, results). A diverged
    combo scores 0.0; a combo violating a model invariant is recorded as
    skipped. Ties break by PR-AUC, then canonical combo order.
    """
    config.validate()
    results = []
    for combo in enumerate_grid(grid):
        key = _canonical(combo)
        entry = {"params": combo, "status": "ok", "roc_auc": 0.0, "pr_auc": 0.0}
        try:
            cs, cc = apply_combo(spec, config, combo)
            cs = replace(
                cs,
                family=spec.family,
                init_seed=derive_seed(config.seed, "combo-init", key),
            )
            cs.validate()
            cc = replace(cc, seed=derive_seed(config.seed, "combo-train", key))
            cc.validate()
            check_family_input(cs.family, cc.input_type)
        except ValueError as e:
            entry["status"] = "skipped"
            entry["reason"] = str(e)
            results.append(entry)
            continue
        model = build_model(cs)
        try:
            entry["loss_curve"] = train(model, cc, train_inputs, train_labels)
            scores = predict_scores(model, val_inputs)
            entry["roc_auc"] = float(roc_auc(scores, val_labels))
            entry["pr_auc"] = float(pr_auc(scores, val_labels))
        except DivergedError as e:
            entry["status"] = "diverged"
            entry["reason"] = str(e)
            entry["diverged_step"] = e.step
        results.append(entry)

    scored = [r for r in results if r["status"] != "skipped"]
    if not scored:
        raise ValueError("every grid combo was skipped; nothing to train")
    best = max(
        range(len(scored)),
        key=lambda i: (scored[i]["roc_auc"], scored[i]["pr_auc"], -i),
    )
    combo = scored[best]["params"]
    key = _canonical(combo)
    bs, bc = apply_combo(spec, config, combo)
    bs = replace(bs, family=spec.family, init_seed=derive_seed(config.seed, "combo-init", key))
    bc = replace(bc, seed=derive_seed(config.seed, "combo-train", key))
    return bs, bc, combo, results


# ---------------------------------------------------------------------------
# final protocol
# ---------------------------------------------------------------------------


def measure_inference_ms(model, one_input, repeats=5):
    """Median single-sample forward wall time in milliseconds."""
    x = one_input[None] if one_input.ndim == 3 else one_input
    with T.no_grad():
        model.forward(T.Tensor(x, dtype=model.dtype))  # warm caches and jit
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.forward(T.Tensor(x, dtype=model.dtype))
            times.append((time.perf_counter() - t0) * 1000.0)
    return float(np.median(times))


def finalize_and_test(spec, config, dataset, split, aug_config, ir_range=DEFAULT_IR_RANGE_C):
    """Retrain the winning config from fresh weights on train+val, then
    score the untouched test split.

    Returns (row, model, timing) where row is the deterministic report
    entry and timing carries wall-clock measurements kept out of it.
    """
    config.validate()
    final_aug = replace(aug_config, seed=derive_seed(aug_config.seed, "final"))
    inputs, labels = prepare_inputs(
        dataset, split.train_ids + split.val_ids, config, final_aug, ir_range
    )
    model = build_model(replace(spec, init_seed=derive_seed(spec.init_seed, "final-init")))
    t0 = time.perf_counter()
    loss_curve = train(model, replace(config, seed=derive_seed(config.seed, "final-train")), inputs, labels)
    train_s = time.perf_counter() - t0

    test_ds = dataset.subset(split.test_ids)
    test_inputs = batch_to_input(test_ds.samples, config.input_type, ir_range)
    test_labels = np.array([s.label for s in test_ds.samples], dtype=np.int64)
    scores = predict_scores(model, test_inputs)

    row = {
        "family": spec.family,
        "model": FAMILY_NAMES[spec.family],
        "input_type": config.input_type,
        "upsampled": config.variant == "upaug",
        "augmented": config.variant == "upaug",
        "roc_auc": float(roc_auc(scores, test_labels)),
        "pr_auc": float(pr_auc(scores, test_labels)),
        "roc_curve": [[float(a), float(b)] for a, b in roc_curve(scores, test_labels)],
        "pr_curve": [[float(a), float(b)] for a, b in pr_curve(scores, test_labels)],
        "loss_curve": [float(v) for v in loss_curve],
        "test_size": int(len(test_labels)),
    }
    timing = {
        "train_seconds": train_s,
        "inference_ms": measure_inference_ms(model, test_inputs[0]),
    }
    return row, model, timing


def run_experiment(dataset, family, input_type, variant, *, grid, spec, config, aug_config,
                   split_seed, ir_range=DEFAULT_IR_RANGE_C):
    """Full pipeline for one table row: split, search, finalize, score.

    Returns (row, model, details). ``spec``/``config`` are family-level
    templates; the grid overrides their fields per combo.
    """
    check_family_input(family, input_type)
    config = replace(config, input_type=input_type, variant=variant).validate()
    spec = replace(spec, family=family)

    split = split_dataset(dataset, seed=split_seed)
    search_aug = replace(aug_config, seed=derive_seed(aug_config.seed, "search"))
    train_inputs, train_labels = prepare_inputs(dataset, split.train_ids, config, search_aug, ir_range)
    val_ds = dataset.subset(split.val_ids)
    val_inputs = batch_to_input(val_ds.samples, config.input_type, ir_range)
    val_labels = np.array([s.label for s in val_ds.samples], dtype=np.int64)

    best_spec, best_config, best_combo, results = grid_search(
        spec, config, grid, train_inputs, train_labels, val_inputs, val_labels
    )
    del train_inputs, train_labels
    row, model, timing = finalize_and_test(best_spec, best_config, dataset, split, aug_config, ir_range)
    details = {
        "grid_results": results,
        "best_params": best_combo,
        "timing": timing,
        "split_sizes": [len(split.train_ids), len(split.val_ids), len(split.test_ids)],
    }
    return row, model, details
