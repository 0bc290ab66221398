"""Synthetic glyph dataset and a small frozen classifier.

The classifier supplies the supervision signal for task-driven lens
design: its cross-entropy and the gradient of that loss with respect to
the *input image* are what reach the optics. It is a plain numpy CNN
(conv-relu-pool twice, then a linear head) with a hand-written backward
pass, trained once on sharp glyphs and then frozen.

Glyph images are a pure function of (seed, split, index): four classes
(disk, square, cross, stripes) with jittered position, size, rotation,
and colors on a noisy background, anti-aliased by 4x supersampling.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .imaging import ImagePatch

CLASS_NAMES = ("disk", "square", "cross", "stripes")
_VAL_OFFSET = 1_000_000
MAGIC = b"RLNET1"


@dataclass
class GlyphSpec:
    class_count: int = 4
    image_size: int = 32
    seed: int = 0
    position_jitter: float = 4.0
    scale_range: tuple = (8.0, 12.0)
    noise_sigma: float = 0.02
    min_contrast: float = 0.45


def _render_glyph(spec, index):
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    label = int(rng.integers(0, spec.class_count))
    bg = rng.uniform(0.0, 1.0, 3)
    fg = rng.uniform(0.0, 1.0, 3)
    while np.linalg.norm(fg - bg) < spec.min_contrast:
        fg = rng.uniform(0.0, 1.0, 3)
    half = spec.image_size / 2.0
    cx = half + rng.uniform(-spec.position_jitter, spec.position_jitter)
    cy = half + rng.uniform(-spec.position_jitter, spec.position_jitter)
    s = rng.uniform(*spec.scale_range)
    rot = rng.uniform(0.0, math.pi)

    ss = 4
    n = spec.image_size * ss
    coords = (np.arange(n) + 0.5) / ss
    u, v = np.meshgrid(coords - cx, coords - cy, indexing="xy")
    ur = np.cos(rot) * u + np.sin(rot) * v
    vr = -np.sin(rot) * u + np.cos(rot) * v
    if label == 0:  # disk
        mask = ur * ur + vr * vr <= (0.8 * s) ** 2
    elif label == 1:  # square
        mask = np.maximum(np.abs(ur), np.abs(vr)) <= 0.7 * s
    elif label == 2:  # cross
        arm_w, arm_l = 0.26 * s, 0.9 * s
        mask = ((np.abs(ur) <= arm_w) & (np.abs(vr) <= arm_l)) | \
               ((np.abs(vr) <= arm_w) & (np.abs(ur) <= arm_l))
    else:  # stripes
        period = 0.5 * s
        bar = np.mod(ur / period, 2.0) < 1.0
        mask = bar & (ur * ur + vr * vr <= (0.95 * s) ** 2)

    cover = mask.reshape(spec.image_size, ss, spec.image_size, ss).mean(axis=(1, 3))
    img = bg[None, None, :] + cover[:, :, None] * (fg - bg)[None, None, :]
    img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    return ImagePatch(np.clip(img, 0.0, 1.0), label=label)


def generate_glyphs(spec, n, split="train"):
    """Deterministic labeled patches; train and val index ranges are disjoint."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if split == "train":
        base = 0
    elif split == "val":
        base = _VAL_OFFSET
    else:
        raise ValueError("split must be 'train' or 'val'")
    return [_render_glyph(spec, base + i) for i in range(n)]


# ---------------------------------------------------------------------------
# network


def _conv3x3(x, w, b):
    """x: (B, C, H, W); w: (O, C, 3, 3). Padding 1, stride 1."""
    bsz, cin, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((bsz, w.shape[0], h, wd))
    for di in range(3):
        for dj in range(3):
            out += np.einsum("oc,bchw->bohw", w[:, :, di, dj],
                             xp[:, :, di:di + h, dj:dj + wd], optimize=True)
    return out + b[None, :, None, None]


def _conv3x3_backward(x, w, grad_out):
    bsz, cin, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for di in range(3):
        for dj in range(3):
            dw[:, :, di, dj] = np.einsum("bohw,bchw->oc", grad_out,
                                         xp[:, :, di:di + h, dj:dj + wd],
                                         optimize=True)
            dxp[:, :, di:di + h, dj:dj + wd] += np.einsum(
                "oc,bohw->bchw", w[:, :, di, dj], grad_out, optimize=True)
    db = grad_out.sum(axis=(0, 2, 3))
    return dxp[:, :, 1:-1, 1:-1], dw, db


def _pool2(x):
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _pool2_backward(grad_out):
    g = grad_out[:, :, :, None, :, None] / 4.0
    b, c, h2, _, w2, _ = g.shape
    return np.broadcast_to(g, (b, c, h2, 2, w2, 2)).reshape(b, c, h2 * 2, w2 * 2)


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class TaskNetwork:
    """conv(3->8) relu pool, conv(8->16) relu pool, fc(1024->classes)."""

    def __init__(self, class_count=4, image_size=32, seed=0):
        self.class_count = int(class_count)
        self.image_size = int(image_size)
        rng = np.random.default_rng(seed)
        feat = 16 * (image_size // 4) ** 2
        self.conv1_w = rng.normal(0, math.sqrt(2.0 / (3 * 9)), (8, 3, 3, 3))
        self.conv1_b = np.zeros(8)
        self.conv2_w = rng.normal(0, math.sqrt(2.0 / (8 * 9)), (16, 8, 3, 3))
        self.conv2_b = np.zeros(16)
        self.fc_w = rng.normal(0, math.sqrt(2.0 / feat), (class_count, feat))
        self.fc_b = np.zeros(class_count)
        self._cache = None

    def params(self):
        return {"conv1_w": self.conv1_w, "conv1_b": self.conv1_b,
                "conv2_w": self.conv2_w, "conv2_b": self.conv2_b,
                "fc_w": self.fc_w, "fc_b": self.fc_b}

    def snapshot(self):
        return {k: v.copy() for k, v in self.params().items()}

    def forward_batch(self, images):
        """images: (B, H, W, 3) in [0, 1]. Returns (probs, cache)."""
        x = np.transpose(np.asarray(images, dtype=np.float64), (0, 3, 1, 2))
        x = x - 0.5  # center; He-init convs assume zero-mean inputs
        z1 = _conv3x3(x, self.conv1_w, self.conv1_b)
        a1 = np.maximum(z1, 0.0)
        p1 = _pool2(a1)
        z2 = _conv3x3(p1, self.conv2_w, self.conv2_b)
        a2 = np.maximum(z2, 0.0)
        p2 = _pool2(a2)
        flat = p2.reshape(p2.shape[0], -1)
        logits = flat @ self.fc_w.T + self.fc_b
        probs = _softmax(logits)
        cache = (x, z1, p1, z2, p2, flat, probs)
        self._cache = cache
        return probs, cache

    def backward_batch(self, cache, labels, mean=True):
        """Gradients of the (mean) cross-entropy w.r.t. input and weights."""
        x, z1, p1, z2, p2, flat, probs = cache
        bsz = probs.shape[0]
        dlogits = probs.copy()
        dlogits[np.arange(bsz), labels] -= 1.0
        if mean:
            dlogits /= bsz
        d_fc_w = dlogits.T @ flat
        d_fc_b = dlogits.sum(axis=0)
        dflat = dlogits @ self.fc_w
        dp2 = dflat.reshape(p2.shape)
        da2 = _pool2_backward(dp2)
        dz2 = da2 * (z2 > 0.0)
        dp1, d_c2w, d_c2b = _conv3x3_backward(p1, self.conv2_w, dz2)
        da1 = _pool2_backward(dp1)
        dz1 = da1 * (z1 > 0.0)
        dx, d_c1w, d_c1b = _conv3x3_backward(x, self.conv1_w, dz1)
        grads = {"conv1_w": d_c1w, "conv1_b": d_c1b,
                 "conv2_w": d_c2w, "conv2_b": d_c2b,
                 "fc_w": d_fc_w, "fc_b": d_fc_b}
        return np.transpose(dx, (0, 2, 3, 1)), grads


def forward(net, patch):
    """Probability vector for one patch."""
    px = patch.pixels if isinstance(patch, ImagePatch) else patch
    if px.shape != (net.image_size, net.image_size, 3):
        raise ValueError("expected %dx%dx3 input, got %s"
                         % (net.image_size, net.image_size, px.shape))
    probs, _ = net.forward_batch(px[None])
    return probs[0]


def loss_ce(probs, label):
    return float(-np.log(max(probs[label], 1e-300)))


def backward_input(net, patch, label):
    """dLoss/dInput (H, W, 3) and weight gradients for the cached forward."""
    if net._cache is None:
        raise ValueError("forward must run before backward_input")
    dx, grads = net.backward_batch(net._cache, np.array([label]))
    return dx[0], grads


# ---------------------------------------------------------------------------
# training


def _augment(images, rng):
    """Horizontal flips and +-2 px shifts (edge padded)."""
    out = images.copy()
    bsz = out.shape[0]
    flip = rng.random(bsz) < 0.5
    out[flip] = out[flip, :, ::-1, :]
    shifts = rng.integers(-2, 3, size=(bsz, 2))
    padded = np.pad(out, ((0, 0), (2, 2), (2, 2), (0, 0)), mode="edge")
    h = images.shape[1]
    for i in range(bsz):
        dy, dx = shifts[i]
        out[i] = padded[i, 2 + dy:2 + dy + h, 2 + dx:2 + dx + h, :]
    return out


def train_classifier(spec, epochs=5, lr=3e-3, seed=0, n_train=12000,
                     batch_size=32, quiet=True):
    """Adam training on sharp glyphs with flip/shift augmentation."""
    data = generate_glyphs(spec, n_train, "train")
    images = np.stack([p.pixels for p in data])
    labels = np.array([p.label for p in data])
    net = TaskNetwork(spec.class_count, spec.image_size, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, seed, 17]))

    m = {k: np.zeros_like(v) for k, v in net.params().items()}
    v = {k: np.zeros_like(p) for k, p in net.params().items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    for epoch in range(epochs):
        order = rng.permutation(n_train)
        total = 0.0
        for start in range(0, n_train, batch_size):
            idx = order[start:start + batch_size]
            batch = _augment(images[idx], rng)
            probs, cache = net.forward_batch(batch)
            ce = -np.log(np.maximum(probs[np.arange(len(idx)), labels[idx]], 1e-300))
            total += float(ce.sum())
            _, grads = net.backward_batch(cache, labels[idx])
            t += 1
            params = net.params()
            for k, g in grads.items():
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mh = m[k] / (1 - b1**t)
                vh = v[k] / (1 - b2**t)
                params[k] -= lr * mh / (np.sqrt(vh) + eps)
        if not quiet:
            print("epoch %d: train CE %.4f" % (epoch, total / n_train))
    net._cache = None
    return net


def accuracy(net, patches, batch_size=256):
    """Fraction of patches classified correctly."""
    correct = 0
    for start in range(0, len(patches), batch_size):
        chunk = patches[start:start + batch_size]
        images = np.stack([p.pixels for p in chunk])
        probs, _ = net.forward_batch(images)
        pred = probs.argmax(axis=1)
        correct += int(sum(int(p == c.label) for p, c in zip(pred, chunk)))
    net._cache = None
    return correct / len(patches)


def evaluate(net, patches, system=None, field_angles=None, rays_per_field=4096,
             seed=0, kernel_crop=None, pitch_scale=7.0, threads=1):
    """Accuracy on sharp patches, or on simulated captures through a lens.

    With a lens, every (patch, field) pair counts once, matching the
    all-fields evaluation protocol. ``pitch_scale`` must match the scale
    used during capture-supervised design (a 32px toy patch standing in
    for a 224px training image gives 7).
    """
    if system is None:
        return accuracy(net, patches)
    from .imaging import CAPTURE_KERNEL, simulate_capture_batch
    if field_angles is None:
        raise ValueError("field_angles required when evaluating through a lens")
    if kernel_crop is None:
        kernel_crop = CAPTURE_KERNEL
    caps = simulate_capture_batch(system, patches, field_angles, rays_per_field,
                                  seed, kernel_crop=kernel_crop,
                                  pitch_scale=pitch_scale, threads=threads)
    clipped = [ImagePatch(np.clip(c.pixels, 0.0, 1.0), label=c.label) for c in caps]
    return accuracy(net, clipped)


# ---------------------------------------------------------------------------
# weight files


def save_network(net, path):
    """Binary weight file: RLNET1 magic, little-endian u32 dims, f8 arrays."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        np.array([net.class_count, net.image_size], dtype="<u4").tofile(f)
        for k in ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b"):
            net.params()[k].astype("<f8").tofile(f)


def load_network(path):
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError("not a network weight file (bad magic %r)" % magic)
        class_count, image_size = np.fromfile(f, dtype="<u4", count=2)
        net = TaskNetwork(int(class_count), int(image_size), seed=0)
        for k in ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b"):
            ref = net.params()[k]
            arr = np.fromfile(f, dtype="<f8", count=ref.size).reshape(ref.shape)
            ref[:] = arr
        extra = f.read(1)
        if extra:
            raise ValueError("trailing bytes in weight file")
    return net
