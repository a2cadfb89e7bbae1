"""One-step supervised training, autoregressive rollout, and metrics.

Training fits the model's single step on (noisy) snapshot pairs with a mean
relative L2 loss plus an L1 penalty on the free moment parameters. Rollout
and evaluation measure multi-step prediction against clean ground truth; a
trajectory counts as failed when any step's relative error exceeds the
threshold or the state stops being finite.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


def relative_l2(x, y):
    """||x - y|| / ||y|| with Frobenius norms over everything."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ref = np.linalg.norm(y.ravel())
    if ref == 0.0:
        raise ValueError("zero reference norm")
    return float(np.linalg.norm((x - y).ravel()) / ref)


def relative_l2_loss(pred, target):
    """Differentiable mean over the leading axis of per-sample relative L2.

    pred is a Tensor of shape (B, ...); target a matching numpy array.
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")
    B = target.shape[0]
    refs = np.linalg.norm(target.reshape(B, -1), axis=1)
    if np.any(refs == 0.0):
        raise ValueError("zero reference norm")
    diff = ad.reshape(ad.sub(pred, ad.Tensor(target)), (B, -1))
    norms = ad.l2_norm(diff, axis=-1)
    return ad.mean(ad.mul(norms, 1.0 / refs))


def regularization(model):
    """Sum of L1 norms of the free moment parameters; per-pixel fields
    predicted for a batch are averaged over the leading batch axes."""
    total = None
    for t in model.reg_terms():
        term = ad.l1_norm(t)
        if t.data.ndim > 3:
            lead = int(np.prod(t.data.shape[:-3]))
            term = ad.scale(term, 1.0 / lead)
        total = term if total is None else ad.add(total, term)
    return total


def loss_components(model, inputs, targets, lam):
    """(total, prediction, regularization) loss Tensors for one batch.

    The regularization entry is None when lam is zero or the model has no
    free moment parameters; then total is the prediction loss itself.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape[0] == 0:
        raise ValueError("empty batch")
    pred = model.step(ad.Tensor(inputs))
    out = relative_l2_loss(pred, targets)
    reg = regularization(model) if lam != 0.0 else None
    total = out if reg is None else ad.add(out, ad.scale(reg, lam))
    return total, out, reg


def loss(model, inputs, targets, lam):
    """L_pred + lam * L_reg for one batch of one-step pairs."""
    return loss_components(model, inputs, targets, lam)[0]


class Adam:
    """Adaptive-moment gradient descent over Tensor parameters.

    A parameter may carry an lr_scale array (broadcastable to its shape)
    that multiplies its update; constrained difference layers use it to
    keep steps at a uniform kernel-space size.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            scale = getattr(p, "lr_scale", None)
            if scale is not None:
                step = step * scale
            p.data = p.data - step


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    lam: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("regularization weight must be nonnegative")


def one_step_pairs(dataset):
    """Flatten trajectories into (inputs, targets) one-step pairs, preferring
    the noisy variant when present."""
    data = dataset.noisy if dataset.noisy is not None else dataset.clean
    tail = data.shape[2:]
    X = data[:, :-1].reshape((-1,) + tail)
    Y = data[:, 1:].reshape((-1,) + tail)
    return X, Y


def train(model, dataset, config, epoch_log=None):
    """Minibatch one-step training; returns the per-epoch mean loss history.

    The learning rate halves every third of the epoch budget. Shuffling and
    parameter updates are fully determined by config.seed. Passing a list as
    epoch_log appends one dict per epoch with the loss split into its
    prediction and (unweighted) regularization parts.
    """
    X, Y = one_step_pairs(dataset)
    if X.shape[0] == 0:
        raise ValueError("dataset has no one-step pairs")
    opt = Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    decay_every = max(1, config.epochs // 3)
    bs = max(1, min(config.batch_size, X.shape[0]))
    history = []
    for epoch in range(config.epochs):
        opt.lr = config.lr * 0.5 ** (epoch // decay_every)
        perm = rng.permutation(X.shape[0])
        total = pred_total = reg_total = 0.0
        seen = 0
        for s in range(0, X.shape[0], bs):
            idx = perm[s : s + bs]
            opt.zero_grad()
            try:
                L, pred, reg = loss_components(model, X[idx], Y[idx], config.lam)
                ad.backward(L)
            except ad.NonFiniteError as e:
                raise RuntimeError(f"non-finite loss at epoch {epoch}") from e
            opt.step()
            total += float(L.data) * len(idx)
            pred_total += float(pred.data) * len(idx)
            if reg is not None:
                reg_total += float(reg.data) * len(idx)
            seen += len(idx)
        history.append(total / seen)
        if epoch_log is not None:
            epoch_log.append(
                {
                    "epoch": epoch,
                    "loss": total / seen,
                    "pred_loss": pred_total / seen,
                    "reg_loss": reg_total / seen,
                }
            )
    return history


@dataclass
class RolloutResult:
    snapshots: np.ndarray
    errors: np.ndarray | None
    failed: bool
    failed_at: int | None


def rollout(model, u0, steps, reference=None, threshold=1.0):
    """Apply the model step autoregressively from u0.

    With a reference trajectory (steps+1 snapshots, u0 first), records the
    per-step relative L2 error. A non-finite state aborts the roll and marks
    every remaining step with an infinite error; a finite error above the
    threshold flags failure but the roll continues.
    """
    state = np.asarray(u0, dtype=np.float64)
    snaps = [state.copy()]
    errors = np.zeros(steps) if reference is not None else None
    failed_at = None
    with ad.no_grad():
        for j in range(1, steps + 1):
            try:
                state = model.step(ad.Tensor(state)).data
            except ad.NonFiniteError:
                if errors is not None:
                    errors[j - 1 :] = np.inf
                if failed_at is None:
                    failed_at = j
                break
            snaps.append(state.copy())
            if reference is not None:
                e = relative_l2(state, reference[j])
                errors[j - 1] = e
                if e > threshold and failed_at is None:
                    failed_at = j
    return RolloutResult(
        snapshots=np.stack(snaps),
        errors=errors,
        failed=failed_at is not None,
        failed_at=failed_at,
    )


@dataclass
class EvalReport:
    errors: np.ndarray
    avg_l2: float
    sr: float
    failed: list

    def summary(self):
        return f"avg relative L2 {self.avg_l2:.4e}, SR {self.sr:.1f}%"


def evaluate(model, dataset, threshold=1.0):
    """Roll every test trajectory from its clean initial state and score it.

    avg_l2 averages the per-step errors of non-failed trajectories only; SR
    is the percentage of trajectories that never fail.
    """
    clean = dataset.clean
    N, M = clean.shape[0], clean.shape[1] - 1
    errors = np.full((N, M), np.inf)
    failed = []
    for i in range(N):
        r = rollout(model, clean[i, 0], M, reference=clean[i], threshold=threshold)
        errors[i] = r.errors
        if r.failed:
            failed.append(i)
    ok = [i for i in range(N) if i not in failed]
    avg = float(errors[ok].mean()) if ok else float("inf")
    sr = 100.0 * (N - len(failed)) / N
    return EvalReport(errors=errors, avg_l2=avg, sr=sr, failed=failed)
