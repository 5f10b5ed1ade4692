"""Two-stage training orchestration with random hyperparameter search.

Stage one pretrains with the masked-token objective, 20 trials by
default, each trial a fresh draw of (learning rate, batch size, frozen
layer count) from the search space; the trial with the lowest tuning
loss wins. Stage two starts every trial from the pretraining winner,
trains the classification objective, and selects by tuning AUROC. The
best epoch's parameters are what a trial keeps. All randomness derives
from a master seed; per-trial seeds are spawned by trial id, so trials
are independent and the whole search replays bitwise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model as M
from .metrics import auroc


@dataclass(frozen=True)
class SearchSpace:
    lr_low: float = 1e-5
    lr_high: float = 1e-3
    batch_sizes: tuple = (8, 16, 32)
    x_frozen_choices: tuple = (0,)  # fill from num_layers via for_model()

    @staticmethod
    def for_model(num_layers: int, lr_low: float = 1e-5, lr_high: float = 1e-3,
                  batch_sizes: tuple = (8, 16, 32)) -> "SearchSpace":
        return SearchSpace(lr_low=lr_low, lr_high=lr_high, batch_sizes=tuple(batch_sizes),
                           x_frozen_choices=tuple(range(num_layers)))


@dataclass(frozen=True)
class TrialConfig:
    trial_id: int
    learning_rate: float
    batch_size: int
    x_frozen: int
    y_trainable: int
    seed: int


@dataclass
class TrialResult:
    trial: TrialConfig
    history: list  # tuning metric per epoch (epoch 1..n)
    initial_metric: float  # tuning metric before any update
    best_epoch: int
    best_metric: float
    checkpoint_path: Optional[str] = None
    aborted: bool = False
    abort_reason: str = ""


def sample_trial(space: SearchSpace, rng: np.random.Generator, trial_id: int,
                 num_layers: int, seed: int) -> TrialConfig:
    """Log-uniform learning rate, uniform batch size and freeze depth."""
    lr = float(10.0 ** rng.uniform(np.log10(space.lr_low), np.log10(space.lr_high)))
    batch = int(space.batch_sizes[rng.integers(0, len(space.batch_sizes))])
    x_frozen = int(space.x_frozen_choices[rng.integers(0, len(space.x_frozen_choices))])
    return TrialConfig(trial_id=trial_id, learning_rate=lr, batch_size=batch,
                       x_frozen=x_frozen, y_trainable=num_layers - x_frozen, seed=seed)


def checkpoint_best(history, direction: str) -> int:
    """Index of the optimum metric; ties go to the earliest epoch."""
    if not history:
        raise ValueError("empty metric history")
    if direction == "min":
        best = min(history)
    elif direction == "max":
        best = max(history)
    else:
        raise ValueError(f"direction must be 'min' or 'max', got {direction!r}")
    return history.index(best)


def _derive_seed(master_seed: int, *key) -> int:
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=key)
    return int(ss.generate_state(1)[0])


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _balanced_batches(labels, batch_size: int, rng: np.random.Generator):
    """Epoch over all negatives with positives upsampled to ~1/4 per batch.

    Low-incidence cohorts starve plain shuffling of positive gradient
    signal; rank metrics are unaffected by the shifted class prior."""
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if pos.size == 0 or neg.size == 0:
        yield from _batches(len(labels), batch_size, rng)
        return
    n_pos = max(1, batch_size // 4)
    n_neg = batch_size - n_pos
    neg_order = rng.permutation(neg)
    pos_pool = rng.permutation(pos)
    pos_cursor = 0
    for start in range(0, neg_order.size, n_neg):
        chunk = neg_order[start:start + n_neg]
        take = []
        for _ in range(n_pos):
            if pos_cursor == pos_pool.size:
                pos_pool = rng.permutation(pos)
                pos_cursor = 0
            take.append(pos_pool[pos_cursor])
            pos_cursor += 1
        yield np.concatenate([chunk, np.asarray(take)])


def _masked_batch(sequences, indices, mask_rate, seed_base, vocab_size):
    """Corrupt the selected sequences; per-sequence masking seeds keep the
    tuning corruption identical across trials and epochs."""
    corrupted, rows, cols, targets = [], [], [], []
    for row, idx in enumerate(indices):
        out = M.mask_tokens(sequences[idx], mask_rate, seed=seed_base + int(idx),
                            vocab_size=vocab_size)
        if out is None:
            continue
        ids, positions, originals = out
        corrupted.append(ids)
        rows.extend([len(corrupted) - 1] * len(positions))
        cols.extend(positions.tolist())
        targets.extend(originals.tolist())
    if not corrupted or not targets:
        return None
    ids, mask = M.pad_batch(corrupted)
    return dict(ids=ids, mask=mask,
                target_positions=(np.asarray(rows), np.asarray(cols)),
                target_ids=np.asarray(targets))


def mlm_tuning_loss(model: M.EncoderModel, sequences, mask_rate: float, seed: int,
                    batch_size: int = 64) -> float:
    """Mean masked-token loss over a fixed, seed-determined corruption."""
    vocab_size = model.config.vocab_size
    total, count = 0.0, 0
    for start in range(0, len(sequences), batch_size):
        idx = range(start, min(start + batch_size, len(sequences)))
        batch = _masked_batch(sequences, idx, mask_rate, seed, vocab_size)
        if batch is None:
            continue
        n = len(batch["target_ids"])
        total += M.loss_mlm(model, batch["ids"], batch["mask"],
                            batch["target_positions"], batch["target_ids"]) * n
        count += n
    if count == 0:
        raise ValueError("tuning corpus produced no maskable tokens")
    return total / count


def classify_scores(model: M.EncoderModel, sequences, batch_size: int = 64) -> np.ndarray:
    out = np.empty(len(sequences), dtype=np.float64)
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start:start + batch_size]
        ids, mask = M.pad_batch(chunk)
        out[start:start + len(chunk)] = M.forward_classify(model, ids, mask)
    return out


def run_mlm_trial(init_model: M.EncoderModel, trial: TrialConfig, train_seqs, tune_seqs,
                  max_epochs: int, mask_rate: float = 0.15,
                  tune_mask_seed: int = 0) -> tuple:
    """Train one masked-token trial; returns (TrialResult, best model)."""
    model = init_model.copy()
    opt = M.AdamState(learning_rate=trial.learning_rate)
    freeze = M.FreezeSpec(trial.x_frozen, trial.y_trainable)
    rng = np.random.default_rng(trial.seed)
    vocab_size = model.config.vocab_size

    initial = mlm_tuning_loss(model, tune_seqs, mask_rate, tune_mask_seed)
    history = []
    best_model = model.copy()
    best_metric = np.inf
    try:
        for epoch in range(max_epochs):
            mask_seed_base = _derive_seed(trial.seed, epoch)
            for idx in _batches(len(train_seqs), trial.batch_size, rng):
                batch = _masked_batch(train_seqs, idx, mask_rate, mask_seed_base, vocab_size)
                if batch is None:
                    continue
                M.train_step(model, opt, batch, "mlm", freeze)
            metric = mlm_tuning_loss(model, tune_seqs, mask_rate, tune_mask_seed)
            history.append(metric)
            if metric < best_metric:
                best_metric = metric
                best_model = model.copy()
    except M.TrainingAbort as exc:
        if not history:
            return TrialResult(trial, [], initial, -1, np.inf,
                               aborted=True, abort_reason=str(exc)), None
        best_epoch = checkpoint_best(history, "min")
        return TrialResult(trial, history, initial, best_epoch, history[best_epoch],
                           aborted=True, abort_reason=str(exc)), best_model
    best_epoch = checkpoint_best(history, "min")
    return TrialResult(trial, history, initial, best_epoch, history[best_epoch]), best_model


def run_classify_trial(start_model: M.EncoderModel, trial: TrialConfig,
                       train_seqs, train_labels, tune_seqs, tune_labels,
                       max_epochs: int, balanced: bool = True) -> tuple:
    """Fine-tune one classification trial; selection metric is tuning AUROC."""
    model = start_model.copy()
    opt = M.AdamState(learning_rate=trial.learning_rate)
    freeze = M.FreezeSpec(trial.x_frozen, trial.y_trainable)
    rng = np.random.default_rng(trial.seed)
    labels_arr = np.asarray(train_labels, dtype=np.float64)

    initial = auroc(classify_scores(model, tune_seqs), tune_labels)
    history = []
    best_model = model.copy()
    best_metric = -np.inf
    try:
        for _ in range(max_epochs):
            batches = (_balanced_batches(labels_arr, trial.batch_size, rng) if balanced
                       else _batches(len(train_seqs), trial.batch_size, rng))
            for idx in batches:
                ids, mask = M.pad_batch([train_seqs[i] for i in idx])
                batch = dict(ids=ids, mask=mask, labels=labels_arr[idx])
                M.train_step(model, opt, batch, "classify", freeze)
            metric = auroc(classify_scores(model, tune_seqs), tune_labels)
            history.append(metric)
            if metric > best_metric:
                best_metric = metric
                best_model = model.copy()
    except M.TrainingAbort as exc:
        if not history:
            return TrialResult(trial, [], initial, -1, -np.inf,
                               aborted=True, abort_reason=str(exc)), None
        best_epoch = checkpoint_best(history, "max")
        return TrialResult(trial, history, initial, best_epoch, history[best_epoch],
                           aborted=True, abort_reason=str(exc)), best_model
    best_epoch = checkpoint_best(history, "max")
    return TrialResult(trial, history, initial, best_epoch, history[best_epoch]), best_model


@dataclass
class SearchOutcome:
    winner: TrialResult
    results: list
    model: M.EncoderModel
    shared_init_seed: int


def run_pretraining_search(train_seqs, tune_seqs, model_config, space: SearchSpace,
                           n_trials: int = 20, max_epochs: int = 10, seed: int = 0,
                           mask_rate: float = 0.15) -> SearchOutcome:
    """Random search over masked-token pretraining trials; lowest tuning
    loss wins. Every trial starts from one shared seed-derived init."""
    init_seed = _derive_seed(seed, 0)
    shared_init = M.init_model(model_config, init_seed)
    tune_mask_seed = _derive_seed(seed, 1)
    sampler = np.random.default_rng(_derive_seed(seed, 2))

    results, models = [], []
    for t in range(n_trials):
        trial = sample_trial(space, sampler, t, model_config.num_layers,
                             seed=_derive_seed(seed, 3, t))
        result, best_model = run_mlm_trial(shared_init, trial, train_seqs, tune_seqs,
                                           max_epochs, mask_rate, tune_mask_seed)
        results.append(result)
        models.append(best_model)
    live = [i for i, r in enumerate(results) if not r.aborted]
    if not live:
        raise M.TrainingAbort("all pretraining trials aborted: "
                              + "; ".join(r.abort_reason for r in results))
    win = min(live, key=lambda i: (results[i].best_metric, i))
    return SearchOutcome(winner=results[win], results=results, model=models[win],
                         shared_init_seed=init_seed)


def run_finetune_search(pretrained: M.EncoderModel, train_seqs, train_labels,
                        tune_seqs, tune_labels, space: SearchSpace,
                        n_trials: int = 20, max_epochs: int = 10,
                        seed: int = 0, balanced: bool = True) -> SearchOutcome:
    """Random search over classification fine-tuning trials; highest tuning
    AUROC wins. Every trial starts from the pretraining winner."""
    if len(set(tune_labels)) < 2:
        raise ValueError("tuning set must contain both classes for AUROC selection")
    sampler = np.random.default_rng(_derive_seed(seed, 2))
    results, models = [], []
    for t in range(n_trials):
        trial = sample_trial(space, sampler, t, pretrained.config.num_layers,
                             seed=_derive_seed(seed, 3, t))
        result, best_model = run_classify_trial(pretrained, trial, train_seqs, train_labels,
                                                tune_seqs, tune_labels, max_epochs,
                                                balanced=balanced)
        results.append(result)
        models.append(best_model)
    live = [i for i, r in enumerate(results) if not r.aborted]
    if not live:
        raise M.TrainingAbort("all fine-tuning trials aborted: "
                              + "; ".join(r.abort_reason for r in results))
    win = max(live, key=lambda i: (results[i].best_metric, -i))
    return SearchOutcome(winner=results[win], results=results, model=models[win],
                         shared_init_seed=pretrained.rng_seed)


def write_trials_csv(path, results, checkpoint_of_winner: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial_id", "learning_rate", "batch_size", "x_frozen", "y_trainable",
                    "initial_metric", "best_epoch", "best_metric", "history",
                    "aborted", "checkpoint"])
        for r in results:
            w.writerow([r.trial.trial_id, repr(r.trial.learning_rate), r.trial.batch_size,
                        r.trial.x_frozen, r.trial.y_trainable, repr(r.initial_metric),
                        r.best_epoch, repr(float(r.best_metric)),
                        ";".join(repr(h) for h in r.history),
                        int(r.aborted), r.checkpoint_path or ""])
