"""Desk-scale training harness: softmax cross-entropy, SGD with momentum
and weight decay, step learning-rate schedule, synthetic data, and the
finite-difference gradient checker.

Paper-scale defaults (batch 256, 120 epochs, lr 0.1 divided by 10 every 30
epochs, momentum 0.9, weight decay 4e-5) are kept as the "paper" preset;
the desk preset shrinks batch and epoch counts for CPU runs.
"""

from dataclasses import dataclass, field

import numpy as np

from .network import Network

PRESETS = {
    "paper": {"batch_size": 256, "epochs": 120, "base_lr": 0.1,
              "momentum": 0.9, "weight_decay": 4e-5, "step_epochs": 30},
    "desk": {"batch_size": 32, "epochs": 30, "base_lr": 0.1,
             "momentum": 0.9, "weight_decay": 4e-5, "step_epochs": 30},
}


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean negative log softmax likelihood and its logits gradient."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels out of range [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class Schedule:
    base_lr: float = 0.1
    decay_factor: float = 0.1
    step_epochs: int = 30
    total_epochs: int = 120

    def __post_init__(self):
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must be in (0, 1)")

    def lr_at(self, epoch):
        if not 0 <= epoch < self.total_epochs:
            raise ValueError(f"epoch {epoch} outside [0, {self.total_epochs})")
        return self.base_lr * self.decay_factor ** (epoch // self.step_epochs)


def lr_at(sched: Schedule, epoch):
    return sched.lr_at(epoch)


class SGD:
    """SGD with momentum; weight decay hits only ``*.weight`` parameters
    (convolution and fully-connected kernels), never BN gamma/beta or
    biases."""

    def __init__(self, lr=0.1, momentum=0.9, weight_decay=4e-5):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def step(self, net: Network):
        grads = dict(net.named_grads())
        for name, p in net.named_params():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            wd = self.weight_decay if name.endswith(".weight") else 0.0
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
            v = self.momentum * v + g + wd * p
            self.velocity[name] = v
            p -= self.lr * v


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray  # u8, (count, c, h, w)
    labels: np.ndarray  # u8 class ids
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise ValueError("images must be (count, c, h, w) with matching labels")
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if self.labels.max() >= self.class_count:
            raise ValueError("label exceeds class_count")

    def __len__(self):
        return len(self.images)

    def as_float(self):
        return self.images.astype(np.float64) / 127.5 - 1.0


def make_synthetic_dataset(count=64, size=8, channels=3, classes=2, seed=0):
    """Linearly separable toy set: each class lights up its own vertical
    band, plus mild noise."""
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 60, size=(count, channels, size, size),
                          dtype=np.uint8)
    labels = (np.arange(count) % classes).astype(np.uint8)
    band = max(1, size // classes)
    for i, lab in enumerate(labels):
        x0 = int(lab) * band
        images[i, :, :, x0:x0 + band] = rng.integers(
            180, 255, size=(channels, size, band), dtype=np.uint8)
    perm = rng.permutation(count)
    return Dataset(images[perm], labels[perm], classes)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train_loop(net: Network, data: Dataset, sched: Schedule, opt: SGD,
               epochs, seed=0, batch_size=32, flip_augment=False,
               log=None):
    """Seed-deterministic SGD loop; returns [(epoch, lr, loss, accuracy)]."""
    x_all = data.as_float()
    if x_all.shape[1] != net.in_channels:
        raise ValueError(
            f"dataset has {x_all.shape[1]} channels, network expects "
            f"{net.in_channels}")
    y_all = data.labels.astype(int)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        opt.lr = sched.lr_at(epoch)
        order = rng.permutation(len(data))
        losses = []
        correct = 0
        for start in range(0, len(data), batch_size):
            idx = order[start:start + batch_size]
            xb = x_all[idx]
            if flip_augment:
                flip = rng.random(len(idx)) < 0.5
                xb = xb.copy()
                xb[flip] = xb[flip, :, :, ::-1]
            yb = y_all[idx]
            net.zero_grad()
            logits = net.forward(xb, train=True)
            loss, grad = cross_entropy(logits, yb)
            net.backward(grad)
            opt.step(net)
            losses.append(loss * len(idx))
            correct += int((logits.argmax(axis=1) == yb).sum())
        record = (epoch, opt.lr, sum(losses) / len(data), correct / len(data))
        history.append(record)
        if log is not None:
            log(f"epoch {record[0]} lr {record[1]:.6g} "
                f"loss {record[2]:.6f} acc {record[3]:.4f}")
    return history


def evaluate(net: Network, data: Dataset, batch_size=64):
    """Eval-mode accuracy (running BN statistics)."""
    x_all = data.as_float()
    y_all = data.labels.astype(int)
    correct = 0
    for start in range(0, len(data), batch_size):
        logits = net.forward(x_all[start:start + batch_size], train=False)
        correct += int((logits.argmax(axis=1) == y_all[start:start + batch_size]).sum())
    return correct / len(data)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def relative_error(analytic, numeric, atol=1e-7):
    """|a - f| / max(|a|, |f|, 1e-8), with differences below ``atol``
    treated as agreement.

    The absolute floor is needed because central differences resolve a
    gradient only down to roughly 1e-8; an exactly-zero analytic gradient
    (they occur: a per-channel shift feeding a train-mode batch norm has
    zero true gradient) would otherwise score FD noise against the 1e-8
    denominator floor.
    """
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.where(diff < atol, 0.0, diff / denom)


def numerical_gradient(f, arr):
    """Central differences with per-element step 1e-6 * (1 + |value|)."""
    grad = np.zeros_like(arr, dtype=float)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = 1e-6 * (1.0 + abs(orig))
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad


def gradcheck(unit, x, seed=0, train=True, labels=None):
    """Max relative error of analytic vs finite-difference gradients.

    ``unit`` is any layer, module, or Network (given ``labels`` the network
    objective is cross-entropy; otherwise a fixed random projection of the
    output is used as the scalar objective).
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=float)

    if labels is not None:
        def objective():
            return cross_entropy(unit.forward(x, train=train), labels)[0]

        def analytic():
            unit.zero_grad()
            logits = unit.forward(x, train=train)
            _, grad = cross_entropy(logits, labels)
            return unit.backward(grad)
    else:
        probe = None

        def objective():
            nonlocal probe
            out = unit.forward(x, train=train)
            if probe is None:
                probe = rng.normal(size=out.shape)
            return float((out * probe).sum())

        def analytic():
            unit.zero_grad()
            objective()
            return unit.backward(probe)

    grad_x = analytic()
    grads = dict(unit.named_grads()) if isinstance(unit, Network) \
        else dict(unit.grads)
    params = dict(unit.named_params()) if isinstance(unit, Network) \
        else dict(unit.params)

    worst = relative_error(grad_x, numerical_gradient(objective, x)).max()
    for name, p in params.items():
        num = numerical_gradient(objective, p)
        worst = max(worst, relative_error(grads[name], num).max())
    return float(worst)
