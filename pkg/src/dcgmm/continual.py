"""Sequential learning tasks, evaluation protocols and mixture replay.

The class-incremental task decompositions (SLTs), the realistic and
prescient evaluation protocols, the accuracy/ratio metrics and the
generative-replay training loop live here.  Protocol runners drive models
through a narrow duck-typed interface (``train_on_batch``, ``predict``,
``begin_task``, ``set_learning_rate``, ``copy``) so they can be audited and
stubbed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import CapabilityError, ConfigError, DataError, DomainError
from .model import DcgmmModel, build_model
from .tensor import Tensor4

# Class divisions of every supported task decomposition.  Keys are the SLT
# names used in configs; "p" suffixed names permute the features of the
# second task.
SLT_TASKS: dict[str, tuple[tuple[int, ...], ...]] = {
    "D10": ((0, 1, 2, 3, 4, 5, 6, 7, 8, 9),),
    "D10-p10": ((0, 1, 2, 3, 4, 5, 6, 7, 8, 9), (0, 1, 2, 3, 4, 5, 6, 7, 8, 9)),
    "D9-1a": ((0, 1, 2, 3, 4, 5, 6, 7, 8), (9,)),
    "D9-1b": ((0, 1, 2, 4, 5, 6, 7, 8, 9), (3,)),
    "D9-1c": ((0, 2, 3, 4, 5, 6, 7, 8, 9), (1,)),
    "D5-5a": ((0, 1, 2, 3, 4), (5, 6, 7, 8, 9)),
    "D5-5b": ((0, 2, 4, 6, 8), (1, 3, 5, 7, 9)),
    "D5-5c": ((0, 2, 5, 6, 7), (1, 3, 4, 8, 9)),
    "D5-5d": ((3, 4, 6, 8, 9), (0, 1, 2, 5, 7)),
    "D5-5e": ((0, 1, 3, 4, 5), (2, 6, 7, 8, 9)),
    "D5-5f": ((0, 3, 4, 8, 9), (1, 2, 5, 6, 7)),
    "D5-5g": ((0, 5, 6, 7, 8), (1, 2, 3, 4, 9)),
    "D5-5h": ((0, 2, 3, 6, 8), (1, 4, 5, 7, 9)),
    "D5-5i": ((0, 1, 2, 6, 7), (3, 4, 5, 8, 9)),
    "D3-3-3-1": ((0, 1, 2), (3, 4, 5), (6, 7, 8), (9,)),
    "D2-2-2-2-2a": ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9)),
    "D2-2-2-2-2b": ((1, 7), (0, 2), (6, 8), (4, 5), (3, 9)),
    "D1-1-1-1-1-1-1-1-1-1a": tuple((c,) for c in range(10)),
    "D1-1-1-1-1-1-1-1-1-1b": tuple((c,) for c in (7, 1, 2, 0, 6, 8, 4, 5, 9, 3)),
}


@dataclass(frozen=True)
class SltSpec:
    """A named ordered decomposition of a dataset into class subsets."""

    name: str
    tasks: tuple[tuple[int, ...], ...]
    permute_second: bool = False
    permutation_seed: int = 0


def slt_spec(name: str, permutation_seed: int = 0) -> SltSpec:
    """Look up an SLT by name; unknown names list the valid ones."""
    if name not in SLT_TASKS:
        raise ConfigError(
            f"unknown SLT {name!r}; valid names: {', '.join(sorted(SLT_TASKS))}")
    return SltSpec(name=name, tasks=SLT_TASKS[name],
                   permute_second=name.endswith("-p10"),
                   permutation_seed=permutation_seed)


def permute_features(ds: LabeledDataset, seed: int) -> LabeledDataset:
    """Apply one fixed seeded permutation to every sample's flat features."""
    perm = np.random.default_rng(seed).permutation(
        int(np.prod(ds.samples.shape[1:])))
    flat = ds.samples.flatten_features()[:, perm]
    return LabeledDataset(Tensor4(flat.reshape(ds.samples.shape)),
                          ds.labels.copy(), ds.class_count, ds.name + "-perm")


def build_slt(train_ds: LabeledDataset, test_ds: LabeledDataset,
              spec: SltSpec) -> list[tuple[LabeledDataset, LabeledDataset]]:
    """Per-task (train, test) pairs filtered by class membership.

    Permuted variants apply the same seeded feature permutation to the
    second task's train and test parts.
    """
    out = []
    for t, classes in enumerate(spec.tasks):
        try:
            tr = train_ds.filter_classes(classes)
            te = test_ds.filter_classes(classes)
        except DataError as exc:
            raise DataError(f"task {t + 1} of {spec.name}: {exc}") from exc
        if spec.permute_second and t >= 1:
            tr = permute_features(tr, spec.permutation_seed)
            te = permute_features(te, spec.permutation_seed)
        out.append((tr, te))
    return out


def accuracy(predictions, labels) -> float:
    """Fraction of correct predictions."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape or p.size == 0:
        raise DomainError("predictions and labels must be equal-length and non-empty")
    return float(np.mean(p == y))


def omega_all(measured_accuracy: float, baseline_accuracy: float) -> float:
    """Ratio of measured to baseline accuracy (1.0 = no forgetting)."""
    if baseline_accuracy <= 0:
        raise DomainError("baseline accuracy must be positive")
    return measured_accuracy / baseline_accuracy


@dataclass
class MeasurementRecord:
    """One timestamped accuracy measurement inside a protocol run."""

    experiment_id: str
    task_index: int
    iteration: int
    accuracy_current_task: float
    accuracy_baseline: float
    wall_ms: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.accuracy_current_task <= 1.0
                and 0.0 <= self.accuracy_baseline <= 1.0):
            raise DomainError("accuracies must lie in [0, 1]")


def write_records_csv(records, path) -> None:
    """Serialize measurement records (RFC-4180 compatible, LF line ends)."""
    import csv
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["experiment_id", "task", "iteration", "acc_task",
                         "acc_baseline", "wall_ms"])
        for r in records:
            writer.writerow([r.experiment_id, r.task_index, r.iteration,
                             repr(r.accuracy_current_task),
                             repr(r.accuracy_baseline), repr(r.wall_ms)])


class SltData:
    """Data access layer for protocol runners.

    All reads go through these methods, so a wrapping subclass can audit
    exactly which task's train or test data was touched and when.
    """

    def __init__(self, tasks, full_test: LabeledDataset):
        self.tasks = list(tasks)
        self.full_test = full_test

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def train_size(self, task_index: int) -> int:
        return len(self.tasks[task_index][0])

    def task_classes(self, task_index: int) -> list[int]:
        return sorted(np.unique(self.tasks[task_index][0].labels).tolist())

    def train_batches(self, task_index: int, batch_size: int, seed: int):
        """Endless epoch-reshuffled (Tensor4, one-hot) stream for one task."""
        ds = self.tasks[task_index][0]
        rng = np.random.default_rng(seed)
        while True:
            order = rng.permutation(len(ds))
            for start in range(0, len(ds), batch_size):
                idx = order[start:start + batch_size]
                yield Tensor4(ds.samples.array[idx]), ds.one_hot(idx)

    def train_sample_stream(self, task_index: int, seed: int):
        """Endless stream of single (sample-array, one-hot) rows."""
        ds = self.tasks[task_index][0]
        rng = np.random.default_rng(seed)
        onehot = ds.one_hot()
        while True:
            for i in rng.permutation(len(ds)):
                yield ds.samples.array[i], onehot[i]

    def test_set(self, task_index: int):
        ds = self.tasks[task_index][1]
        return ds.samples, ds.labels

    def full_test_set(self):
        return self.full_test.samples, self.full_test.labels


def slt_data_from_datasets(train_ds: LabeledDataset, test_ds: LabeledDataset,
                           spec: SltSpec) -> SltData:
    return SltData(build_slt(train_ds, test_ds, spec), test_ds)


def evaluate(model, samples: Tensor4, labels, batch_size: int = 100) -> float:
    """Accuracy of model.predict over a test set, evaluated in chunks."""
    preds = []
    for start in range(0, len(samples), batch_size):
        preds.append(model.predict(samples.slice_batch(
            start, min(start + batch_size, len(samples)))))
    return accuracy(np.concatenate(preds), labels)


def measurement_points(total_iterations: int, n_measure: int) -> list[int]:
    """1-based iteration numbers of evenly distributed measurements."""
    pts = sorted({(m + 1) * total_iterations // n_measure
                  for m in range(n_measure)} - {0})
    return pts


def iterations_for(n_samples: int, batch_size: int, epochs: int) -> int:
    return int(math.ceil(n_samples / batch_size)) * epochs


@dataclass
class RealisticResult:
    """Outcome of a realistic-protocol run."""

    best_params: dict
    best_t1_accuracy: float
    chosen_lrs: list[float]
    final_task_accuracies: list[float]
    final_baseline_accuracy: float


def _zero_clock() -> float:
    return 0.0


def run_realistic_protocol(model_factory, slt_data: SltData, param_grid,
                           retrain_lr_grid, epochs: int, batch_size: int,
                           n_measure: int, *, experiment_prefix: str = "exp",
                           seed: int = 0, clock=None
                           ) -> tuple[list[MeasurementRecord], RealisticResult]:
    """Application-constrained two-phase evaluation.

    Phase 1 grid-searches all configurations on the first task only and
    keeps the model state with the maximum measured first-task accuracy.
    Phase 2 retrains the winner on each subsequent task, optimizing only the
    learning rate, measuring accuracy on the current task and on the full
    test set, and selecting by the LAST measured value.  No future-task
    training data is read before its task starts, and test data never feeds
    a training step.
    """
    if slt_data.n_tasks < 1:
        raise DomainError("the task list is empty")
    clock = clock or _zero_clock
    records: list[MeasurementRecord] = []
    seeds = np.random.SeedSequence(seed).spawn(len(param_grid) + slt_data.n_tasks)

    best = None   # (accuracy, index, model snapshot, params)
    t1_iters = iterations_for(slt_data.train_size(0), batch_size, epochs)
    points = set(measurement_points(t1_iters, n_measure))
    t1_x, t1_y = slt_data.test_set(0)
    for gi, params in enumerate(param_grid):
        model = model_factory(params, int(seeds[gi].generate_state(1)[0]))
        model.begin_task(t1_iters)
        stream = slt_data.train_batches(0, batch_size, seed=gi + 1)
        for t in range(1, t1_iters + 1):
            x, y = next(stream)
            model.train_on_batch(x, y)
            if t in points:
                acc = evaluate(model, t1_x, t1_y, batch_size)
                records.append(MeasurementRecord(
                    f"{experiment_prefix}-p{gi}", 0, t, acc, acc, clock()))
                if best is None or acc > best[0]:
                    best = (acc, gi, model.copy(), params)
    best_acc, best_gi, best_model, best_params = best

    chosen_lrs: list[float] = []
    final_accs: list[float] = []
    final_baseline = best_acc
    full_x, full_y = slt_data.full_test_set()
    for c in range(1, slt_data.n_tasks):
        iters = iterations_for(slt_data.train_size(c), batch_size, epochs)
        pts = set(measurement_points(iters, n_measure))
        tc_x, tc_y = slt_data.test_set(c)
        candidates = []
        for li, lr in enumerate(retrain_lr_grid):
            m = best_model.copy()
            m.set_learning_rate(lr)
            m.begin_task(iters)
            stream = slt_data.train_batches(c, batch_size, seed=1000 * c + li)
            last_task_acc = 0.0
            last_base_acc = 0.0
            for t in range(1, iters + 1):
                x, y = next(stream)
                m.train_on_batch(x, y)
                if t in pts:
                    last_task_acc = evaluate(m, tc_x, tc_y, batch_size)
                    last_base_acc = evaluate(m, full_x, full_y, batch_size)
                    records.append(MeasurementRecord(
                        f"{experiment_prefix}-t{c}-lr{li}", c, t,
                        last_task_acc, last_base_acc, clock()))
            candidates.append((last_task_acc, last_base_acc, li, lr, m))
        last_acc, base_acc, li, lr, winner = max(candidates, key=lambda c: (c[0], -c[2]))
        best_model = winner
        chosen_lrs.append(lr)
        final_accs.append(last_acc)
        final_baseline = base_acc
    return records, RealisticResult(best_params, best_acc, chosen_lrs,
                                    final_accs, final_baseline)


def run_prescient_protocol(model_factory, slt_data: SltData, param_grid,
                           retrain_lr_grid, epochs: int, batch_size: int,
                           n_measure: int, *, experiment_prefix: str = "pre",
                           seed: int = 0, clock=None
                           ) -> tuple[list[MeasurementRecord], float]:
    """Future-informed reference protocol for two-task decompositions.

    Every phase-1 configuration (not only the winner) is retrained on the
    second task; quality is the accuracy on the union of both test sets and
    the result is the maximum over all configurations, retrain rates and
    measurement times.
    """
    if slt_data.n_tasks != 2:
        raise ConfigError("the prescient protocol is defined for exactly 2 tasks")
    clock = clock or _zero_clock
    records: list[MeasurementRecord] = []
    seeds = np.random.SeedSequence(seed).spawn(len(param_grid))

    x1, y1 = slt_data.test_set(0)
    x2, y2 = slt_data.test_set(1)
    joint_x = Tensor4(np.concatenate([x1.array, x2.array]))
    joint_y = np.concatenate([y1, y2])

    t1_iters = iterations_for(slt_data.train_size(0), batch_size, epochs)
    t2_iters = iterations_for(slt_data.train_size(1), batch_size, epochs)
    pts = set(measurement_points(t2_iters, n_measure))
    best = 0.0
    for gi, params in enumerate(param_grid):
        base = model_factory(params, int(seeds[gi].generate_state(1)[0]))
        base.begin_task(t1_iters)
        stream = slt_data.train_batches(0, batch_size, seed=gi + 1)
        for _ in range(t1_iters):
            x, y = next(stream)
            base.train_on_batch(x, y)
        for li, lr in enumerate(retrain_lr_grid):
            m = base.copy()
            m.set_learning_rate(lr)
            m.begin_task(t2_iters)
            stream2 = slt_data.train_batches(1, batch_size, seed=5000 + 10 * gi + li)
            for t in range(1, t2_iters + 1):
                x, y = next(stream2)
                m.train_on_batch(x, y)
                if t in pts:
                    acc = evaluate(m, joint_x, joint_y, batch_size)
                    best = max(best, acc)
                    records.append(MeasurementRecord(
                        f"{experiment_prefix}-p{gi}-lr{li}", 1, t, acc, acc,
                        clock()))
    return records, best


def doubling_schedule(first_epochs: int, n_tasks: int) -> list[int]:
    """Epoch counts that double with every subsequent task."""
    return [first_epochs * (2 ** t) for t in range(n_tasks)]


def generate_replay_set(learner, classes: list[int], total: int, top_s: int,
                        seed: int) -> tuple[Tensor4, np.ndarray]:
    """Conditionally generate `total` samples, equally many per class."""
    if not classes:
        raise CapabilityError("no classes seen yet; nothing to replay")
    base = total // len(classes)
    counts = [base + (1 if i < total - base * len(classes) else 0)
              for i in range(len(classes))]
    seeds = np.random.SeedSequence(seed).spawn(len(classes))
    parts, labels = [], []
    for cls, cnt, s in zip(classes, counts, seeds):
        if cnt == 0:
            continue
        batch = learner.sample_class(cls, cnt, top_s=top_s,
                                     seed=int(s.generate_state(1)[0]))
        parts.append(batch.array)
        labels.append(np.full(cnt, cls, dtype=np.int64))
    return Tensor4(np.concatenate(parts)), np.concatenate(labels)


def gmr_train(learner, slt_data: SltData, *, epochs_schedule, batch_size: int = 100,
              samples_per_task: int | None = None, top_s: int = 5,
              sigma_reset: float = -1.0, n_measure: int = 10, seed: int = 0,
              experiment_id: str = "gmr", replay: bool = True, clock=None
              ) -> list[MeasurementRecord]:
    """Train across tasks with self-generated rehearsal batches.

    After every task the learner conditionally generates a replay set with
    equal counts per previously-seen class, sized like the next task's
    training set (or ``samples_per_task`` when given).  Retraining batches
    concatenate generated and new samples at the old:new class-count ratio
    (2*batch_size rows per step); ``replay=False`` disables rehearsal and
    yields the plain sequential-training baseline that forgets.
    """
    if slt_data.n_tasks < 1:
        raise DomainError("the task list is empty")
    schedule = list(epochs_schedule)
    if len(schedule) < slt_data.n_tasks:
        raise ConfigError("epochs schedule shorter than the task list")
    clock = clock or _zero_clock
    records: list[MeasurementRecord] = []
    full_x, full_y = slt_data.full_test_set()
    classes_seen: list[int] = []
    n_classes = slt_data.full_test.class_count
    for t in range(slt_data.n_tasks):
        new_classes = slt_data.task_classes(t)
        iters = iterations_for(slt_data.train_size(t), batch_size, schedule[t])
        pts = set(measurement_points(iters, n_measure))
        tc_x, tc_y = slt_data.test_set(t)
        if t == 0 or not replay:
            stream = slt_data.train_batches(t, batch_size, seed=seed + t)
            mixed = None
        else:
            total = samples_per_task or slt_data.train_size(t)
            gen_x, gen_labels = generate_replay_set(
                learner, classes_seen, total, top_s, seed=seed * 977 + t)
            gen_onehot = np.zeros((len(gen_labels), n_classes))
            gen_onehot[np.arange(len(gen_labels)), gen_labels] = 1.0
            n_old, n_new = len(classes_seen), len(new_classes)
            n_gen = int(round(2 * batch_size * n_old / (n_old + n_new)))
            n_fresh = 2 * batch_size - n_gen
            gen_stream = _row_stream(gen_x.array, gen_onehot, seed=seed * 31 + t)
            new_stream = slt_data.train_sample_stream(t, seed=seed + t)
            mixed = (gen_stream, new_stream, n_gen, n_fresh)
        if t > 0 and sigma_reset >= 0:
            learner.reset_annealing(sigma_reset)
        learner.begin_task(iters)
        for it in range(1, iters + 1):
            if mixed is None:
                x, y = next(stream)
            else:
                gen_stream, new_stream, n_gen, n_fresh = mixed
                rows = [next(gen_stream) for _ in range(n_gen)]
                rows += [next(new_stream) for _ in range(n_fresh)]
                x = Tensor4(np.stack([r[0] for r in rows]))
                y = np.stack([r[1] for r in rows])
            learner.train_on_batch(x, y)
            if it in pts:
                records.append(MeasurementRecord(
                    experiment_id, t, it,
                    evaluate(learner, tc_x, tc_y, batch_size),
                    evaluate(learner, full_x, full_y, batch_size), clock()))
        classes_seen = sorted(set(classes_seen) | set(new_classes))
    return records


def _row_stream(samples: np.ndarray, onehot: np.ndarray, seed: int):
    rng = np.random.default_rng(seed)
    while True:
        for i in rng.permutation(len(samples)):
            yield samples[i], onehot[i]


class DcgmmLearner:
    """Protocol adapter around a layered mixture model.

    Exposes the duck-typed training interface the protocol runners expect
    plus conditional sampling for replay.
    """

    def __init__(self, arch: str, input_shape, *, eps: float = 0.01,
                 eps_classifier: float | None = None, seed: int = 0, **hyper):
        self.arch = arch
        self.hyper = dict(hyper)
        self.model: DcgmmModel = build_model(
            arch, input_shape, eps=eps,
            eps_classifier=eps_classifier if eps_classifier is not None else eps,
            seed=seed, **hyper)

    def train_on_batch(self, x: Tensor4, y: np.ndarray | None) -> None:
        self.model.train_step(x, y)

    def predict(self, x: Tensor4) -> np.ndarray:
        return self.model.classify(x)

    def begin_task(self, total_iterations: int) -> None:
        self.model.begin_training(total_iterations)

    def set_learning_rate(self, lr: float) -> None:
        for i in self.model.eps_by_layer:
            self.model.eps_by_layer[i] = lr
        self.model.eps_classifier = lr

    def reset_annealing(self, factor: float) -> None:
        self.model.reset_annealing(factor)

    def sample_class(self, class_index: int, count: int, top_s: int = 5,
                     seed: int = 0) -> Tensor4:
        return self.model.sample(count, class_index=class_index, top_s=top_s,
                                 seed=seed)

    def copy(self) -> "DcgmmLearner":
        dup = object.__new__(DcgmmLearner)
        dup.arch = self.arch
        dup.hyper = dict(self.hyper)
        dup.model = self.model.copy()
        return dup
