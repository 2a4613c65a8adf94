"""Shared numeric oracles for tests: central finite differences and a
reference bilinear upsampler, both independent of the library code paths
they check."""

import numpy as np
import torch


def central_diff_param_grads(fn, params: list[torch.Tensor],
                             h: float = 1e-4) -> list[torch.Tensor]:
    """Numeric gradient of scalar fn() w.r.t. each parameter tensor."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                plus = float(fn())
                flat[i] = orig - h
                minus = float(fn())
                flat[i] = orig
                gflat[i] = (plus - minus) / (2 * h)
            grads.append(g)
    return grads


def max_rel_error(analytic: torch.Tensor, numeric: torch.Tensor,
                  floor: float = 1e-7) -> float:
    """Worst relative disagreement, ignoring entries where both are ~0."""
    a = analytic.detach().reshape(-1)
    n = numeric.reshape(-1)
    denom = torch.maximum(a.abs(), n.abs())
    keep = denom > floor
    if not keep.any():
        return 0.0
    return float(((a - n).abs()[keep] / denom[keep]).max())


def assert_grads_close(fn, params: list[torch.Tensor], rel_tol: float = 1e-3,
                       h: float = 1e-4) -> float:
    """Compare autograd and central differences for scalar fn().

    fn must rebuild its graph on every call; params must be float64 leaves.
    Returns the worst relative error seen.
    """
    for p in params:
        if p.grad is not None:
            p.grad = None
    value = fn()
    value.backward()
    numeric = central_diff_param_grads(fn, params, h=h)
    worst = 0.0
    for p, num in zip(params, numeric):
        analytic = p.grad if p.grad is not None else torch.zeros_like(p)
        err = max_rel_error(analytic, num)
        worst = max(worst, err)
        assert err <= rel_tol, f"gradient mismatch: rel err {err:.2e} > {rel_tol}"
    return worst


def encoder_kink_margins(model, x: torch.Tensor) -> dict[str, float]:
    """Distances to the nondifferentiable points of the attention map: ReLU
    pre-activations, latent |.| kinks, and raw-map min/max tie gaps. A
    finite-difference check is only meaningful when all are > ~10 * h."""
    with torch.no_grad():
        pre = []
        hooks = []
        for m in model.encoder.features:
            if isinstance(m, (torch.nn.Conv2d, torch.nn.BatchNorm2d)):
                hooks.append(m.register_forward_hook(
                    lambda _m, _i, out: pre.append(out.clone())))
        enc = model.encode(x)
        for h in hooks:
            h.remove()
        raw = model.attention_raw(enc).reshape(x.shape[0], -1)
        srt = raw.sort(dim=1).values
        return {
            "relu": min(float(p.abs().min()) for p in pre),
            "z": float(enc.z.abs().min()),
            "minmax": float(min((srt[:, 1] - srt[:, 0]).min(),
                                (srt[:, -1] - srt[:, -2]).min())),
        }


def bilinear_upsample_ref(raw: np.ndarray, size: int) -> np.ndarray:
    """Reference half-pixel-aligned bilinear upsample of one (h, w) map."""
    h, w = raw.shape
    out = np.zeros((size, size), dtype=np.float64)
    sy = h / size
    sx = w / size
    for y in range(size):
        src_y = (y + 0.5) * sy - 0.5
        y0 = int(np.floor(src_y))
        ty = src_y - y0
        y0c = min(max(y0, 0), h - 1)
        y1c = min(max(y0 + 1, 0), h - 1)
        for x in range(size):
            src_x = (x + 0.5) * sx - 0.5
            x0 = int(np.floor(src_x))
            tx = src_x - x0
            x0c = min(max(x0, 0), w - 1)
            x1c = min(max(x0 + 1, 0), w - 1)
            top = raw[y0c, x0c] * (1 - tx) + raw[y0c, x1c] * tx
            bot = raw[y1c, x0c] * (1 - tx) + raw[y1c, x1c] * tx
            out[y, x] = top * (1 - ty) + bot * ty
    return out
