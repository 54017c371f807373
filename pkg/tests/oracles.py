"""Independent reference computations used by the tests (plain loops, float64)."""
import math
from collections import deque

import numpy as np


def window_variance_hsv(image, window, epsilon):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    H, W = img.shape

    def px(y, x):
        return img[min(max(y, 0), H - 1), min(max(x, 0), W - 1)]

    g = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            gx = (px(y, x + 1) - px(y, x - 1)) / 2.0
            gy = (px(y + 1, x) - px(y - 1, x)) / 2.0
            g[y, x] = math.sqrt(gx * gx + gy * gy)
    r = window // 2
    out = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            vals = [g[min(max(y + dy, 0), H - 1), min(max(x + dx, 0), W - 1)]
                    for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
            out[y, x] = np.var(np.array(vals))
    return (out - epsilon)[None].astype(np.float32)


def count_regions(image, boundary_byte):
    """4-connected flood fill over pixels whose byte differs from the boundary byte."""
    q = np.asarray(image)
    H, W = q.shape
    seen = np.zeros((H, W), dtype=bool)
    regions = 0
    for sy in range(H):
        for sx in range(W):
            if seen[sy, sx] or q[sy, sx] == boundary_byte:
                continue
            regions += 1
            todo = deque([(sy, sx)])
            seen[sy, sx] = True
            while todo:
                y, x = todo.popleft()
                for ny, nx in ((y + 1, x), (y - 1, x), (y, x + 1), (y, x - 1)):
                    if 0 <= ny < H and 0 <= nx < W and not seen[ny, nx] and q[ny, nx] != boundary_byte:
                        seen[ny, nx] = True
                        todo.append((ny, nx))
    return regions


def quantize_byte(v):
    """Reference [-1, 1] -> [0, 255] quantizer with round-half-away-from-zero."""
    v = min(max(float(v), -1.0), 1.0)
    s = (v + 1.0) * 255.0 / 2.0
    return int(math.floor(s + 0.5)) if s >= 0 else -int(math.floor(-s + 0.5))


def ssim_windows(a, b, window, peak=2.0):
    a = np.asarray(a, dtype=np.float64).reshape(np.shape(a)[-2:])
    b = np.asarray(b, dtype=np.float64).reshape(np.shape(b)[-2:])
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    vals = []
    H, W = a.shape
    for y in range(H - window + 1):
        for x in range(W - window + 1):
            pa = a[y:y + window, x:x + window].ravel()
            pb = b[y:y + window, x:x + window].ravel()
            ma, mb = pa.sum() / pa.size, pb.sum() / pb.size
            va = ((pa - ma) ** 2).sum() / pa.size
            vb = ((pb - mb) ** 2).sum() / pb.size
            cov = ((pa - ma) * (pb - mb)).sum() / pa.size
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def loss_fd_objective(model, x0, xt, t, sched, cfg):
    """Wrap the kernel-weighted loss of ``model`` as f(params) -> (value, grad) over a flat float64 vector."""
    import torch
    from torch.nn.utils import parameters_to_vector, vector_to_parameters

    from kao.kernel import kernel_weighted_loss

    model = model.double()

    def predict(x, tt):
        return model(x, tt)[0]

    def f(theta):
        vector_to_parameters(torch.as_tensor(theta, dtype=torch.float64), model.parameters())
        model.zero_grad()
        loss = kernel_weighted_loss(x0, xt, t, predict, sched, cfg, dtype=torch.float64)
        loss.backward()
        grad = torch.cat([(torch.zeros_like(p) if p.grad is None else p.grad).reshape(-1) for p in model.parameters()])
        return loss.item(), grad.numpy().copy()

    return f, parameters_to_vector(model.parameters()).detach().numpy().copy()
