"""Differentiable Gaussian splatting: forward compositing, analytic backward, losses.

Forward model per gaussian i (front-to-back over camera-frame depth):
    mu2d   = project(mean_cam)
    Sigma' = J cov_cam J^T                      (J = projection Jacobian at mean_cam)
    a_i    = opacity_i * exp(-0.5 d^T Sigma'^-1 d)
    pixel  = sum_i color_i a_i T_i + background T_final,   T_i = prod_{j<i} (1 - a_j)

Contributions with a_i below the cutoff are skipped. Alphas are capped at
1 - 1e-7 so the backward pass can reconstruct transmittances by division.
The backward pass is exact for the implemented forward (cutoff and cap
included), propagating image gradients to camera-frame gaussian parameters
and, through supplied kinematic Jacobians, to (omega, delta_t, q).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DimensionMismatchError, StaleCacheError
from .geometry import DEFAULT_Z_MIN, Intrinsics
from .tool_model import GaussianJacobians, PosedGaussian

ALPHA_MAX = 1.0 - 1e-7
MIN_ALPHA_CUTOFF = 1e-12


@dataclass(frozen=True)
class Frame:
    """H x W x 3 image with channel values in [0, 1]; optional boolean mask."""

    pixels: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected HxWx3 pixels, got shape {px.shape}")
        if px.min() < -1e-9 or px.max() > 1.0 + 1e-9:
            raise ValueError("pixel values must lie in [0, 1]")
        px = np.clip(px, 0.0, 1.0)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != px.shape[:2]:
                raise ValueError("mask dimensions must match pixels")
            m.setflags(write=False)
            object.__setattr__(self, "mask", m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


@dataclass(frozen=True)
class RenderSettings:
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    alpha_cutoff: float = 1.0 / 255.0
    z_min: float = DEFAULT_Z_MIN

    def __post_init__(self):
        bg = np.array(self.background, dtype=float).reshape(3)
        if bg.min() < 0 or bg.max() > 1:
            raise ValueError("background color must be in [0, 1]")
        bg.setflags(write=False)
        object.__setattr__(self, "background", bg)
        object.__setattr__(self, "alpha_cutoff", max(float(self.alpha_cutoff), MIN_ALPHA_CUTOFF))


@dataclass(frozen=True)
class LossConfig:
    """Blend weight and SSIM parameters for the render-and-compare objective."""

    alpha_blend: float = 0.8
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2

    def __post_init__(self):
        if not 0.0 <= self.alpha_blend <= 1.0:
            raise ValueError("alpha_blend must be in [0, 1]")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be odd and >= 3")
        if self.ssim_sigma <= 0:
            raise ValueError("ssim_sigma must be > 0")


@dataclass
class SplatCache:
    """Per-render records needed to replay compositing in the backward pass."""

    n_input: int
    kept: np.ndarray  # original gaussian indices, len K
    order: np.ndarray  # depth order over kept slots
    mean_cam: np.ndarray  # (K, 3)
    cov_cam: np.ndarray  # (K, 3, 3)
    mu2d: np.ndarray  # (K, 2)
    inv2d: np.ndarray  # (K, 2, 2)
    jproj: np.ndarray  # (K, 2, 3)
    opacity: np.ndarray  # (K,)
    color: np.ndarray  # (K, 3)
    rect: np.ndarray  # (K, 4): y0, y1, x0, x1 half-open
    t_final: np.ndarray  # (H, W)
    intrinsics: Intrinsics
    settings: RenderSettings


@dataclass(frozen=True)
class RenderOutput:
    image: Frame
    alpha: np.ndarray
    splat_cache: SplatCache


@dataclass(frozen=True)
class ParameterGradients:
    """Loss gradients in the optimizer's chart: body-frame omega, translation, joints."""

    omega: np.ndarray
    translation: np.ndarray
    joints: np.ndarray


@dataclass(frozen=True)
class GaussianImageGradients:
    """Per-gaussian image-loss gradients in the camera frame (appearance fitting path)."""

    dmean_cam: np.ndarray  # (N, 3)
    dcov_cam: np.ndarray  # (N, 3, 3)
    dcolor: np.ndarray  # (N, 3)
    dopacity: np.ndarray  # (N,)


def _pack(gaussians: list[PosedGaussian]):
    n = len(gaussians)
    mean = np.empty((n, 3))
    cov = np.empty((n, 3, 3))
    opacity = np.empty(n)
    color = np.empty((n, 3))
    for i, g in enumerate(gaussians):
        mean[i] = g.mean_cam
        cov[i] = g.cov_cam
        opacity[i] = g.opacity
        color[i] = g.color
    return mean, cov, opacity, color


def _prepare(gaussians: list[PosedGaussian], k: Intrinsics, settings: RenderSettings) -> SplatCache:
    mean, cov, opacity, color = _pack(gaussians)
    h, w = k.height, k.width
    cutoff = settings.alpha_cutoff

    kept_rows = []
    for i in range(len(gaussians)):
        x, y, z = mean[i]
        if z <= settings.z_min or opacity[i] <= cutoff:
            continue
        fx, fy = k.fx, k.fy
        u = fx * x / z + k.cx
        v = fy * y / z + k.cy
        jp = np.array([[fx / z, 0.0, -fx * x / (z * z)], [0.0, fy / z, -fy * y / (z * z)]])
        sig = jp @ cov[i] @ jp.T
        a, b, c = sig[0, 0], sig[0, 1], sig[1, 1]
        det = a * c - b * b
        if det <= 0 or not np.isfinite(det):
            continue
        inv = np.array([[c, -b], [-b, a]]) / det
        lam_max = 0.5 * (a + c) + math.sqrt(max(0.25 * (a - c) ** 2 + b * b, 0.0))
        q_max = 2.0 * math.log(opacity[i] / cutoff)
        radius = math.sqrt(max(q_max, 0.0) * lam_max) + 1.0
        x0 = max(int(math.floor(u - radius)), 0)
        x1 = min(int(math.ceil(u + radius)) + 1, w)
        y0 = max(int(math.floor(v - radius)), 0)
        y1 = min(int(math.ceil(v + radius)) + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        kept_rows.append((i, u, v, inv, jp, np.array([y0, y1, x0, x1])))

    kk = len(kept_rows)
    kept = np.array([r[0] for r in kept_rows], dtype=int)
    mu2d = np.array([(r[1], r[2]) for r in kept_rows]).reshape(kk, 2)
    inv2d = np.array([r[3] for r in kept_rows]).reshape(kk, 2, 2)
    jproj = np.array([r[4] for r in kept_rows]).reshape(kk, 2, 3)
    rect = np.array([r[5] for r in kept_rows], dtype=int).reshape(kk, 4)
    depth = mean[kept, 2] if kk else np.empty(0)
    order = np.argsort(depth, kind="stable")

    return SplatCache(
        n_input=len(gaussians),
        kept=kept,
        order=order,
        mean_cam=mean[kept].reshape(kk, 3),
        cov_cam=cov[kept].reshape(kk, 3, 3),
        mu2d=mu2d,
        inv2d=inv2d,
        jproj=jproj,
        opacity=opacity[kept],
        color=color[kept].reshape(kk, 3),
        rect=rect,
        t_final=np.ones((h, w)),
        intrinsics=k,
        settings=settings,
    )


def _footprint(cache: SplatCache, slot: int):
    """Alpha footprint of one kept gaussian over its pixel rect.

    Returns (rect slices, du, dv, g, alpha, active) where `active` marks
    pixels whose alpha is differentiable (above cutoff, below the cap).
    """
    y0, y1, x0, x1 = cache.rect[slot]
    u, v = cache.mu2d[slot]
    du = np.arange(x0, x1, dtype=float) - u  # (nx,)
    dv = np.arange(y0, y1, dtype=float) - v  # (ny,)
    m = cache.inv2d[slot]
    q = (
        m[0, 0] * du[None, :] ** 2
        + 2.0 * m[0, 1] * du[None, :] * dv[:, None]
        + m[1, 1] * dv[:, None] ** 2
    )
    g = np.exp(-0.5 * q)
    raw = cache.opacity[slot] * g
    keep = raw >= cache.settings.alpha_cutoff
    alpha = np.where(keep, np.minimum(raw, ALPHA_MAX), 0.0)
    active = keep & (raw < ALPHA_MAX)
    return (slice(y0, y1), slice(x0, x1)), du, dv, g, alpha, active


def render(gaussians: list[PosedGaussian], k: Intrinsics, settings: RenderSettings | None = None) -> RenderOutput:
    """Splat gaussians into an image with front-to-back alpha compositing.

    Gaussians behind the camera (z <= z_min) are culled, not errors; an empty
    input yields the background image with zero alpha.
    """
    settings = settings or RenderSettings()
    cache = _prepare(gaussians, k, settings)
    h, w = k.height, k.width
    color_acc = np.zeros((h, w, 3))
    transmittance = np.ones((h, w))
    for slot in cache.order:
        rect, _, _, _, alpha, _ = _footprint(cache, slot)
        contrib = alpha * transmittance[rect]
        color_acc[rect] += contrib[:, :, None] * cache.color[slot]
        transmittance[rect] *= 1.0 - alpha
    cache.t_final = transmittance
    image = color_acc + transmittance[:, :, None] * settings.background
    return RenderOutput(
        image=Frame(np.clip(image, 0.0, 1.0)),
        alpha=1.0 - transmittance,
        splat_cache=cache,
    )


def backward_to_gaussians(out: RenderOutput, dl_dimage: np.ndarray) -> GaussianImageGradients:
    """Propagate an image gradient back to camera-frame gaussian parameters.

    Replays compositing in reverse depth order, reconstructing per-layer
    transmittance from the cached final value. Exact for the forward pass as
    implemented; culled or skipped contributions receive zero gradient.
    """
    cache = out.splat_cache
    k = cache.intrinsics
    dl = np.asarray(dl_dimage, dtype=float)
    if dl.shape != (k.height, k.width, 3):
        raise DimensionMismatchError(f"dL/dimage shape {dl.shape} != {(k.height, k.width, 3)}")

    n = cache.n_input
    dmean = np.zeros((n, 3))
    dcov = np.zeros((n, 3, 3))
    dcolor = np.zeros((n, 3))
    dopacity = np.zeros(n)

    t_state = cache.t_final.copy()
    value_after = cache.t_final[:, :, None] * cache.settings.background

    fx, fy = k.fx, k.fy
    for slot in cache.order[::-1]:
        rect, du, dv, g, alpha, active = _footprint(cache, slot)
        one_minus = 1.0 - alpha
        t_before = t_state[rect] / one_minus
        contrib = alpha * t_before
        color = cache.color[slot]

        dl_rect = dl[rect]
        dl_dalpha = np.einsum(
            "yxc,yxc->yx", dl_rect, color[None, None, :] * t_before[:, :, None] - value_after[rect] / one_minus[:, :, None]
        )
        gi = cache.kept[slot]
        dcolor[gi] = np.einsum("yxc,yx->c", dl_rect, contrib)
        masked = np.where(active, dl_dalpha, 0.0)
        dopacity[gi] = float(np.sum(masked * g))

        wg = masked * cache.opacity[slot] * g  # dL/dg * g per pixel
        m = cache.inv2d[slot]
        md_u = m[0, 0] * du[None, :] + m[0, 1] * dv[:, None]
        md_v = m[0, 1] * du[None, :] + m[1, 1] * dv[:, None]
        dmu = np.array([np.sum(wg * md_u), np.sum(wg * md_v)])
        s_uu = 0.5 * np.sum(wg * md_u * md_u)
        s_uv = 0.5 * np.sum(wg * md_u * md_v)
        s_vv = 0.5 * np.sum(wg * md_v * md_v)
        dsig2d = np.array([[s_uu, s_uv], [s_uv, s_vv]])

        jp = cache.jproj[slot]
        x, y, z = cache.mean_cam[slot]
        dmean_g = jp.T @ dmu
        # Sigma' also depends on mean_cam through J
        cov_jt = cache.cov_cam[slot] @ jp.T
        dj_dx = np.array([[0.0, 0.0, -fx / z**2], [0.0, 0.0, 0.0]])
        dj_dy = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -fy / z**2]])
        dj_dz = np.array(
            [[-fx / z**2, 0.0, 2.0 * fx * x / z**3], [0.0, -fy / z**2, 2.0 * fy * y / z**3]]
        )
        for axis, dj in enumerate((dj_dx, dj_dy, dj_dz)):
            dmean_g[axis] += 2.0 * np.sum(dsig2d * (dj @ cov_jt))
        dmean[gi] = dmean_g
        dcov[gi] = jp.T @ dsig2d @ jp

        value_after[rect] += contrib[:, :, None] * color
        t_state[rect] = t_before

    return GaussianImageGradients(dmean, dcov, dcolor, dopacity)


def render_backward(
    out: RenderOutput,
    dl_dimage: np.ndarray,
    gaussians: list[PosedGaussian],
    jacobians: GaussianJacobians,
) -> ParameterGradients:
    """Chain image gradients through compositing and kinematics to (omega, delta_t, q)."""
    cache = out.splat_cache
    if len(gaussians) != cache.n_input or jacobians.dmean_domega.shape[0] != cache.n_input:
        raise StaleCacheError(
            f"cache built for {cache.n_input} gaussians, got {len(gaussians)} "
            f"(jacobians for {jacobians.dmean_domega.shape[0]})"
        )
    gg = backward_to_gaussians(out, dl_dimage)
    omega = np.einsum("nd,ndk->k", gg.dmean_cam, jacobians.dmean_domega) + np.einsum(
        "nij,nkij->k", gg.dcov_cam, jacobians.dcov_domega
    )
    translation = np.einsum("nd,ndk->k", gg.dmean_cam, jacobians.dmean_ddt)
    joints = np.einsum("nd,ndk->k", gg.dmean_cam, jacobians.dmean_dq) + np.einsum(
        "nij,nkij->k", gg.dcov_cam, jacobians.dcov_dq
    )
    return ParameterGradients(omega, translation, joints)


# --- losses -----------------------------------------------------------------


def _pixels(frame) -> np.ndarray:
    return frame.pixels if isinstance(frame, Frame) else np.asarray(frame, dtype=float)


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise DimensionMismatchError(f"frame shapes differ: {a.shape} vs {b.shape}")


def _ssim_kernel(cfg: LossConfig) -> np.ndarray:
    r = cfg.ssim_window // 2
    t = np.arange(-r, r + 1, dtype=float)
    k = np.exp(-0.5 * (t / cfg.ssim_sigma) ** 2)
    return k / k.sum()


def _window_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode Gaussian-window average (only fully in-bounds windows)."""
    r = len(kernel) // 2
    full = correlate1d(correlate1d(img, kernel, axis=0, mode="constant"), kernel, axis=1, mode="constant")
    return full[r:-r, r:-r]


def _window_scatter(field_valid: np.ndarray, kernel: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of `_window_mean`: embed the valid-region field, then correlate."""
    r = len(kernel) // 2
    z = np.zeros(shape)
    z[r:-r, r:-r] = field_valid
    return correlate1d(correlate1d(z, kernel, axis=0, mode="constant"), kernel, axis=1, mode="constant")


def _ssim_channel_stats(x: np.ndarray, y: np.ndarray, kernel: np.ndarray, cfg: LossConfig):
    mu_x = _window_mean(x, kernel)
    mu_y = _window_mean(y, kernel)
    sig_xx = _window_mean(x * x, kernel) - mu_x * mu_x
    sig_yy = _window_mean(y * y, kernel) - mu_y * mu_y
    sig_xy = _window_mean(x * y, kernel) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + cfg.ssim_c1
    a2 = 2.0 * sig_xy + cfg.ssim_c2
    b1 = mu_x * mu_x + mu_y * mu_y + cfg.ssim_c1
    b2 = sig_xx + sig_yy + cfg.ssim_c2
    return mu_x, mu_y, a1, a2, b1, b2


def ssim_map(a, b, cfg: LossConfig | None = None) -> np.ndarray:
    """Per-pixel mean-channel SSIM over fully in-bounds windows.

    Output has shape (H - window + 1, W - window + 1).
    """
    cfg = cfg or LossConfig()
    x = _pixels(a)
    y = _pixels(b)
    _check_same_shape(x, y)
    if min(x.shape[0], x.shape[1]) < cfg.ssim_window:
        raise DimensionMismatchError(
            f"frame {x.shape[:2]} smaller than SSIM window {cfg.ssim_window}"
        )
    kernel = _ssim_kernel(cfg)
    maps = []
    for c in range(3):
        _, _, a1, a2, b1, b2 = _ssim_channel_stats(x[:, :, c], y[:, :, c], kernel, cfg)
        maps.append(a1 * a2 / (b1 * b2))
    return np.mean(maps, axis=0)


def ssim(a, b, cfg: LossConfig | None = None) -> float:
    """Mean structural similarity of two frames, in [-1, 1]."""
    return float(np.mean(ssim_map(a, b, cfg)))


def ssim_with_grad(a, b, cfg: LossConfig | None = None) -> tuple[float, np.ndarray]:
    """SSIM value plus its exact gradient with respect to the first frame."""
    cfg = cfg or LossConfig()
    x = _pixels(a)
    y = _pixels(b)
    _check_same_shape(x, y)
    if min(x.shape[0], x.shape[1]) < cfg.ssim_window:
        raise DimensionMismatchError(
            f"frame {x.shape[:2]} smaller than SSIM window {cfg.ssim_window}"
        )
    kernel = _ssim_kernel(cfg)
    shape = x.shape[:2]
    total = 0.0
    grad = np.zeros_like(x)
    n_positions = (shape[0] - cfg.ssim_window + 1) * (shape[1] - cfg.ssim_window + 1)
    for c in range(3):
        xc, yc = x[:, :, c], y[:, :, c]
        mu_x, mu_y, a1, a2, b1, b2 = _ssim_channel_stats(xc, yc, kernel, cfg)
        s = a1 * a2 / (b1 * b2)
        total += float(np.mean(s))
        # dS/dmu_x, dS/dsigma_xy, dS/dsigma_xx fields over window centers
        t_mu = 2.0 * (mu_y * a2 - mu_x * a1 * a2 / b1) / (b1 * b2)
        t_xy = 2.0 * a1 / (b1 * b2)
        t_xx = -2.0 * a1 * a2 / (b1 * b2 * b2)
        base = _window_scatter(t_mu - t_xy * mu_y - t_xx * mu_x, kernel, shape)
        grad[:, :, c] = (
            base
            + yc * _window_scatter(t_xy, kernel, shape)
            + xc * _window_scatter(t_xx, kernel, shape)
        ) / (n_positions * 3.0)
    return total / 3.0, grad


def mse(a, b) -> float:
    """Mean squared error over all pixel channel values."""
    x = _pixels(a)
    y = _pixels(b)
    _check_same_shape(x, y)
    return float(np.mean((x - y) ** 2))


def combined_loss(ren, obs, cfg: LossConfig | None = None) -> float:
    """alpha_blend * (1 - SSIM) + (1 - alpha_blend) * MSE."""
    cfg = cfg or LossConfig()
    return cfg.alpha_blend * (1.0 - ssim(ren, obs, cfg)) + (1.0 - cfg.alpha_blend) * mse(ren, obs)


def combined_loss_with_grad(ren, obs, cfg: LossConfig | None = None) -> tuple[float, np.ndarray]:
    """Combined loss plus its gradient with respect to the rendered frame."""
    cfg = cfg or LossConfig()
    x = _pixels(ren)
    y = _pixels(obs)
    s, ds = ssim_with_grad(x, y, cfg)
    value = cfg.alpha_blend * (1.0 - s) + (1.0 - cfg.alpha_blend) * float(np.mean((x - y) ** 2))
    grad = -cfg.alpha_blend * ds + (1.0 - cfg.alpha_blend) * 2.0 * (x - y) / x.size
    return value, grad


def pixel_averaged_loss(
    ren_out: RenderOutput,
    obs,
    cfg: LossConfig | None = None,
    alpha_support: float = 0.01,
) -> float:
    """Combined loss averaged only over rendered-support pixels.

    Support is the set of pixels with composited alpha above `alpha_support`;
    both the SSIM and MSE terms are re-averaged over it, which removes the
    bias toward hypotheses that fill more of the frame. Returns +inf when
    nothing was rendered. SSIM positions are window centers; if the support
    contains no fully in-bounds window center the SSIM term is scored as
    fully dissimilar.
    """
    cfg = cfg or LossConfig()
    x = _pixels(ren_out.image)
    y = _pixels(obs)
    _check_same_shape(x, y)
    support = ren_out.alpha > alpha_support
    count = int(support.sum())
    if count == 0:
        return float("inf")
    mse_term = float(np.mean((x[support] - y[support]) ** 2))
    r = cfg.ssim_window // 2
    inner = support[r:-r, r:-r]
    if inner.any():
        ssim_term = float(np.mean(ssim_map(x, y, cfg)[inner]))
    else:
        ssim_term = 0.0
    return cfg.alpha_blend * (1.0 - ssim_term) + (1.0 - cfg.alpha_blend) * mse_term
