"""Recognition benchmark: seeded trials of train/test splits over three methods.

* ``cnn_svm``: SVM on penultimate features of the base network.
* ``raw_svm``: SVM on flattened pixels.
* ``finetuned_cnn``: base network with a fresh head, fine-tuned on the trial's
  training chips and classified by its own softmax argmax.

Also provides the stand-in "pretrained" base network: a mini-CNN trained once
on a synthetic set disjoint from the benchmark data.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from . import network as nw
from . import svm
from . import synthgen as sg
from .errors import TrainingDataError

log = logging.getLogger(__name__)

METHODS = ("cnn_svm", "raw_svm", "finetuned_cnn")
CSV_COLUMNS = ("method", "class", "precision", "recall", "trial", "undefined")

PRETRAIN_SEED = 99
PRETRAIN_PER_CLASS = 60
PRETRAIN_DISTRACTORS = 240
PRETRAIN_CONFIG = nw.FineTuneConfig(learning_rate=0.01, momentum=0.9, epochs=15, batch_size=8, seed=1)
PRETRAIN_DISPLACEMENT = (20.0, 48.0)  # distractor target offset range, px
PRETRAIN_FEATURE_PENALTY = 0.01  # weight on squared feature norm of distractors


def pretrain_base(per_class: int = PRETRAIN_PER_CLASS, n_distractors: int = PRETRAIN_DISTRACTORS,
                  seed: int = PRETRAIN_SEED, config: nw.FineTuneConfig = PRETRAIN_CONFIG,
                  init_seed: int = 1, feature_penalty: float = PRETRAIN_FEATURE_PENALTY) -> nw.Network:
    """Train the base mini-CNN on synthetic targets plus distractor chips.

    Distractors (background, or a target pushed far off-centre) get a uniform
    target distribution over the classes rather than a label of their own, and
    their penultimate features are pulled towards zero by a squared-norm
    penalty. Patches that are not centred targets then land near one fixed
    point in feature space, which keeps their SVM scores flat.
    """
    targets = sg.generate_dataset(per_class, seed)
    distract = sg.generate_distractor_chips(n_distractors, seed + 1, displacement=PRETRAIN_DISPLACEMENT)
    k = len(targets.class_names)
    t = np.zeros((len(targets) + n_distractors, k))
    t[np.arange(len(targets)), targets.labels] = 1.0
    t[len(targets):] = 1.0 / k
    net = nw.Network.initialize(nw.mini_cnn_spec(targets.class_names), seed=init_seed)
    penalty = np.zeros(len(t))
    penalty[len(targets):] = feature_penalty
    net, history = nw.train_arrays(net, np.concatenate([targets.images, distract]), t, config,
                                   feature_penalty=penalty)
    log.info("base network pretrained: final loss %.4f", history[-1])
    return net


def trial_seed(master_seed: int, trial: int) -> int:
    """Seed for one trial; depends only on (master, trial) so extra trials leave earlier ones alone."""
    return int(np.random.SeedSequence([master_seed, trial]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class BenchmarkConfig:
    trials: int = 4
    train_per_class: int = 20
    test_per_class: int = 10
    methods: tuple[str, ...] = METHODS
    master_seed: int = 0
    C: float = 1.0
    finetune: nw.FineTuneConfig = nw.FineTuneConfig()

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("train_per_class and test_per_class must be >= 1")
        unknown = set(self.methods) - set(METHODS)
        if unknown or not self.methods:
            raise ValueError(f"methods must be a non-empty subset of {METHODS}, got {self.methods}")


@dataclass
class BenchmarkResult:
    rows: list[dict] = field(default_factory=list)
    splits: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def summary(self, method: str) -> tuple[float | None, float | None]:
        """Mean precision and recall of ``method`` averaged over trials."""
        for r in self.rows:
            if r["method"] == method and r["class"] == "mean" and r["trial"] == "all":
                return r["precision"], r["recall"]
        raise KeyError(method)


def _predict(method: str, dataset: sg.LabeledChipSet, train: np.ndarray, test: np.ndarray,
             base: nw.Network | None, features: np.ndarray | None, config: BenchmarkConfig,
             seed: int) -> np.ndarray:
    if method == "finetuned_cnn":
        net = nw.replace_head(base, dataset.class_names, seed=seed % (1 << 32))
        ft = nw.FineTuneConfig(**{**config.finetune.__dict__, "seed": seed % (1 << 32)})
        net, _ = nw.fine_tune(net, dataset.subset(train), ft)
        return np.argmax(nw.predict_proba(net, dataset.images[test]), axis=1)
    x = features if method == "cnn_svm" else dataset.images.reshape(len(dataset), -1)
    model = svm.train(svm.FeatureSet(x[train], dataset.labels[train], dataset.class_names), config.C,
                      seed=seed % (1 << 32))
    return svm.classify_batch(model, x[test])


def _score_rows(method: str, trial, pr: metrics.PrecisionRecall) -> list[dict]:
    rows = [{"method": method, "class": c.name, "precision": c.precision, "recall": c.recall,
             "trial": trial, "undefined": ""} for c in pr.per_class]
    rows.append({"method": method, "class": "mean", "precision": pr.mean_precision,
                 "recall": pr.mean_recall, "trial": trial, "undefined": ";".join(pr.undefined)})
    return rows


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def run_benchmark(dataset: sg.LabeledChipSet, base: nw.Network | None,
                  config: BenchmarkConfig = BenchmarkConfig()) -> BenchmarkResult:
    """Per-trial and trial-averaged precision/recall rows for every method."""
    counts = np.bincount(dataset.labels, minlength=len(dataset.class_names))
    need = config.train_per_class + config.test_per_class
    if counts.min() < need:
        raise TrainingDataError(f"need {need} chips per class, smallest class has {counts.min()}")
    uses_net = {"cnn_svm", "finetuned_cnn"} & set(config.methods)
    if uses_net and base is None:
        raise ValueError(f"methods {sorted(uses_net)} need a base network")
    features = nw.extract_features_batch(base, dataset.images) if "cnn_svm" in config.methods else None
    result = BenchmarkResult()
    per_trial: dict[str, list[metrics.PrecisionRecall]] = {m: [] for m in config.methods}
    for trial in range(config.trials):
        seed = trial_seed(config.master_seed, trial)
        train, test = dataset.split(config.train_per_class, config.test_per_class, seed)
        result.splits.append((train, test))
        log.info("trial %d seed %d train %s test %s", trial, seed, train.tolist(), test.tolist())
        truth = [dataset.class_names[i] for i in dataset.labels[test]]
        for method in config.methods:
            pred = _predict(method, dataset, train, test, base, features, config, seed)
            cm = metrics.accumulate(zip(truth, (dataset.class_names[i] for i in pred)), dataset.class_names)
            pr = metrics.precision_recall(cm)
            per_trial[method].append(pr)
            result.rows += _score_rows(method, trial, pr)
    for method in config.methods:
        prs = per_trial[method]
        for c, name in enumerate(dataset.class_names):
            result.rows.append({"method": method, "class": name,
                                "precision": _mean(p.per_class[c].precision for p in prs),
                                "recall": _mean(p.per_class[c].recall for p in prs),
                                "trial": "all", "undefined": ""})
        result.rows.append({"method": method, "class": "mean",
                            "precision": _mean(p.mean_precision for p in prs),
                            "recall": _mean(p.mean_recall for p in prs), "trial": "all", "undefined": ""})
    return result
