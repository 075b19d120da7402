"""3DMM fitting by project-out Gauss-Newton, and texture sampling.

The fitted cost is::

    |F(W(p, c)) - T(lam)|^2 + c_l |W_l(p, c) - s_l|^2
        + c_s p' S_s^-1 p + c_t lam' S_t^-1 lam

with ``F`` the feature image sampled at the projected visible vertices,
``W_l`` the projected landmark vertices and ``S_s``, ``S_t`` diagonal
eigenvalue matrices.  The texture coefficients enter quadratically, so they
are eliminated in closed form: for the visible texture rows ``U`` and
``G = U'U + c_t S_t^-1`` the pixel term minimised over ``lam`` is ``a' M a``
with ``a = F - t_mean`` and ``M = I - U G^-1 U'``.  Gauss-Newton then runs on
``(p, c)`` alone with residual ``M^(1/2) a`` and the optimal ``lam`` is
recovered at the end.

Features and texture are compared in 8-bit intensity units
(``feature_scale = 255``): images and texture models stay in [0, 1], the
pixel term is evaluated on ``255 * (F - T)``.  The default weights assume
that scale.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import (BehindCameraError, CameraParams, InvalidParameterError, Landmarks2D, TriMesh,
                       default_principal_point, project_with_jacobians, rotation_to_quaternion,
                       similarity_align)
from .morphable import LinearModel, MorphableModel
from .render import rasterize_buffers

log = logging.getLogger(__name__)

FEATURES = ("raw-rgb", "image-gradient")


class FitError(RuntimeError):
    pass


class FitDegenerateError(FitError):
    pass


class NumericalFailureError(FitError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass
class FitConfig:
    c_l: float = 1e5
    c_s: float = 3e6
    c_t: float = 1.0
    max_iters: int = 50
    landmark_rms_tol: float = 0.5
    cost_rel_tol: float = 1e-6
    feature_fn: str = "raw-rgb"
    visibility_every: int = 5
    max_halvings: int = 10
    init_focal: float | None = None
    depth_tol: float = 0.05
    feature_scale: float = 255.0
    fix_focal: bool = False

    def __post_init__(self):
        if min(self.c_l, self.c_s, self.c_t) < 0:
            raise ValueError("cost weights must be nonnegative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.feature_scale > 0:
            raise ValueError("feature_scale must be positive")
        if self.feature_fn not in FEATURES:
            raise ValueError(f"feature_fn must be one of {FEATURES}")

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class FittingResult:
    p: np.ndarray
    lam: np.ndarray
    camera: CameraParams
    sampled_texture: np.ndarray
    visible: np.ndarray
    cost_trace: list[float]
    converged: bool
    reason: str
    n_iterations: int = 0
    n_accepted: int = 0
    landmark_rms: float = float("nan")
    pixel_rms: float = float("nan")
    history: list[dict] = field(default_factory=list)

    def shape(self, model: MorphableModel | LinearModel) -> np.ndarray:
        m = model.shape if isinstance(model, MorphableModel) else model
        return m.instance(self.p).reshape(-1, 3)

    def summary(self) -> dict:
        return {"converged": self.converged, "reason": self.reason, "n_iterations": self.n_iterations,
                "n_accepted": self.n_accepted, "final_cost": self.cost_trace[-1] if self.cost_trace else None,
                "landmark_rms": self.landmark_rms, "pixel_rms": self.pixel_rms,
                "n_visible": int(self.visible.sum())}

    def to_dict(self) -> dict:
        return {"p": self.p.tolist(), "lambda": self.lam.tolist(), "camera": self.camera.to_dict(),
                "cost_trace": list(self.cost_trace), **self.summary()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict, sampled_texture=None, visible=None) -> "FittingResult":
        n = 0 if sampled_texture is None else len(sampled_texture)
        return cls(np.asarray(d["p"]), np.asarray(d["lambda"]), CameraParams.from_dict(d["camera"]),
                   np.zeros((n, 3)) if sampled_texture is None else np.asarray(sampled_texture),
                   np.zeros(n, dtype=bool) if visible is None else np.asarray(visible, dtype=bool),
                   list(d["cost_trace"]), d["converged"], d["reason"], d.get("n_iterations", 0),
                   d.get("n_accepted", 0), d.get("landmark_rms", float("nan")), d.get("pixel_rms", float("nan")))


# ---------------------------------------------------------------------------
# image features and sampling


def feature_image(image: np.ndarray, feature_fn: str = "raw-rgb") -> np.ndarray:
    """Per-pixel features: the RGB values, or their x/y central differences (6 channels)."""
    image = np.asarray(image, dtype=np.float64)
    if feature_fn == "raw-rgb":
        return image
    if feature_fn == "image-gradient":
        gy, gx = np.gradient(image, axis=(0, 1))
        return np.concatenate([gx, gy], axis=2)
    raise ValueError(f"unknown feature function {feature_fn!r}")


def bilinear_sample(img: np.ndarray, uv: np.ndarray, with_gradient: bool = False):
    """Sample ``img`` (H, W, C) at pixel positions ``uv`` (n, 2).

    Positions are clamped into the image.  With ``with_gradient`` also
    returns the exact derivative of the bilinear interpolant, (n, C, 2).
    """
    h, w = img.shape[:2]
    u = np.clip(uv[:, 0], 0.0, w - 1.0)
    v = np.clip(uv[:, 1], 0.0, h - 1.0)
    x0 = np.minimum(np.floor(u).astype(np.int64), w - 2) if w > 1 else np.zeros(len(u), dtype=np.int64)
    y0 = np.minimum(np.floor(v).astype(np.int64), h - 2) if h > 1 else np.zeros(len(v), dtype=np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (u - x0)[:, None]
    fy = (v - y0)[:, None]
    i00, i01, i10, i11 = img[y0, x0], img[y0, x1], img[y1, x0], img[y1, x1]
    val = (1 - fx) * (1 - fy) * i00 + fx * (1 - fy) * i01 + (1 - fx) * fy * i10 + fx * fy * i11
    if not with_gradient:
        return val
    du = (1 - fy) * (i01 - i00) + fy * (i11 - i10)
    dv = (1 - fx) * (i10 - i00) + fx * (i11 - i01)
    return val, np.stack([du, dv], axis=-1)


def visibility(vertices: np.ndarray, triangles: np.ndarray, cam: CameraParams, width: int, height: int,
               depth_tol: float = 0.05) -> np.ndarray:
    """Vertices that project inside the image and pass the z-buffer test.

    A vertex counts as visible only when its depth is within ``depth_tol``
    (model units) of the nearest surface at its pixel and all four bilinear
    taps around it are covered by the mesh itself, which keeps silhouette
    samples from mixing in background.
    """
    V = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    mesh = TriMesh(V, triangles)
    tri_id, _, zbuf = rasterize_buffers(mesh, cam, width, height, cull_backfaces=True)
    covered = tri_id >= 0
    v = V @ cam.rotation.T + np.asarray(cam.t)
    z = v[:, 2]
    vis = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.asarray(cam.principal_point) + cam.f * v[:, :2] / z[:, None]
    inside = vis & (uv[:, 0] >= 0) & (uv[:, 0] <= width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= height - 1)
    out = np.zeros(len(V), dtype=bool)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        return out
    u, w_ = uv[idx, 0], uv[idx, 1]
    x0 = np.clip(np.floor(u).astype(np.int64), 0, width - 1)
    y0 = np.clip(np.floor(w_).astype(np.int64), 0, height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    taps = covered[y0, x0] & covered[y0, x1] & covered[y1, x0] & covered[y1, x1]
    xr = np.clip(np.rint(u).astype(np.int64), 0, width - 1)
    yr = np.clip(np.rint(w_).astype(np.int64), 0, height - 1)
    front = z[idx] <= zbuf[yr, xr] + depth_tol
    out[idx] = taps & front
    return out


def _texture_solve(U: np.ndarray, ev: np.ndarray, c_t: float, a: np.ndarray) -> np.ndarray:
    G = U.T @ U + c_t * np.diag(1.0 / ev)
    return np.linalg.solve(G, U.T @ a)


def sample_texture(image: np.ndarray, vertices: np.ndarray, cam: CameraParams, triangles: np.ndarray,
                   texture_model: LinearModel | None = None, c_t: float = 1.0, depth_tol: float = 0.05,
                   feature_scale: float = 255.0):
    """Per-vertex colours bilinearly sampled from the image.

    Returns ``(colors, visible)``.  Vertices that are occluded or project
    outside the image get the colour of the texture model's regularised
    reconstruction from the visible ones (or the mean visible colour when no
    texture model is given).
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    V = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    vis = visibility(V, triangles, cam, w, h, depth_tol)
    colors = np.zeros((len(V), 3))
    if vis.any():
        v = V[vis] @ cam.rotation.T + np.asarray(cam.t)
        uv = np.asarray(cam.principal_point) + cam.f * v[:, :2] / v[:, 2:3]
        colors[vis] = bilinear_sample(image, uv)
    hidden = ~vis
    if hidden.any():
        if texture_model is not None and texture_model.dim == 3 * len(V):
            rows = np.repeat(vis, 3)
            U = texture_model.basis[rows]
            a = colors[vis].ravel() - texture_model.mean[rows]
            # same units as the fit: the prior weight is relative to the scaled features
            lam = _texture_solve(U, texture_model.eigenvalues * feature_scale ** 2, c_t, a * feature_scale
                                 ) / feature_scale if vis.any() else np.zeros(
                texture_model.n_components)
            recon = texture_model.instance(lam).reshape(-1, 3)
            colors[hidden] = recon[hidden]
        elif vis.any():
            colors[hidden] = colors[vis].mean(0)
    return colors, vis


# ---------------------------------------------------------------------------
# initialisation


def initial_camera(model: MorphableModel | LinearModel, landmarks: Landmarks2D, width: int, height: int,
                   focal: float | None = None, p=None) -> CameraParams:
    """Camera from a 2D similarity between model and image landmarks.

    The in-plane rotation and scale come from Procrustes on the landmark x/y
    coordinates; depth follows from the scale under the chosen focal length.
    """
    shape = model.shape if isinstance(model, MorphableModel) else model
    p = np.zeros(shape.n_components) if p is None else np.asarray(p)
    X = shape.instance(p).reshape(-1, 3)[landmarks.vertex_map]
    s, R2, t2 = similarity_align(X[:, :2], landmarks.points)
    f = float(focal) if focal else 2.5 * max(width, height)
    R = np.eye(3)
    R[:2, :2] = R2
    q = rotation_to_quaternion(R)
    pp = np.asarray(default_principal_point(width, height))
    depth = f / s
    Xr = X @ R.T
    tz = depth - Xr[:, 2].mean()
    txy = (t2 - pp) * depth / f
    return CameraParams(f, tuple(q), (txy[0], txy[1], tz), tuple(pp))


# ---------------------------------------------------------------------------
# the fitter


class _Problem:
    """Residuals and Jacobians of the texture-eliminated cost at fixed visibility."""

    def __init__(self, feats, landmarks, model: MorphableModel, cfg: FitConfig, pp):
        self.feats = cfg.feature_scale * feats
        self.h, self.w, self.C = feats.shape
        self.lm = landmarks
        self.shape = model.shape
        self.tex = model.texture
        self.k = cfg.feature_scale
        self.tris = model.triangles
        self.cfg = cfg
        self.pp = tuple(pp)
        self.n_s = self.shape.n_components
        self.U3 = self.shape.basis.reshape(-1, 3, self.n_s)
        self.sqrt_cs = np.sqrt(cfg.c_s / self.shape.eigenvalues)
        self.sqrt_cl = np.sqrt(cfg.c_l)
        self.set_visible(np.zeros(self.shape.dim // 3, dtype=bool))

    def set_visible(self, vis: np.ndarray):
        self.vis = vis.copy()
        idx = np.flatnonzero(vis)
        self.vis_idx = idx
        rows = (idx[:, None] * self.C + np.arange(self.C)).ravel()
        self.tex_rows = rows
        Ut = self.tex.basis[rows]
        self.Ut = Ut
        self.t_mean = self.k * self.tex.mean[rows]
        k = Ut.shape[1]
        if len(rows) == 0 or k == 0:
            self.Q = np.zeros((len(rows), 0))
            self.shrink = np.zeros(0)
            self.G = None
            return
        ev = self.k ** 2 * self.tex.eigenvalues
        G = Ut.T @ Ut + self.cfg.c_t * np.diag(1.0 / ev)
        self.G = G
        Q, R = np.linalg.qr(Ut)
        K = R @ np.linalg.solve(G, R.T)
        kappa, Vk = np.linalg.eigh((K + K.T) / 2)
        kappa = np.clip(kappa, 0.0, 1.0)
        self.Q = Q @ Vk
        # M^(1/2) = I - Q diag(1 - sqrt(1 - kappa)) Q'
        self.shrink = 1.0 - np.sqrt(1.0 - kappa)

    def half_M(self, x):
        if self.Q.shape[1] == 0:
            return x
        return x - self.Q @ (self.shrink[:, None] * (self.Q.T @ x)) if x.ndim == 2 else \
            x - self.Q @ (self.shrink * (self.Q.T @ x))

    def params_to_camera(self, c) -> CameraParams:
        return CameraParams.from_vector(c, self.pp)

    def pixel_residual(self, p, cam):
        """Raw ``a = F(W) - t_mean`` over visible vertices, plus the pieces for its Jacobian."""
        S = self.shape.instance(p).reshape(-1, 3)
        uv, d_cam, d_vert = project_with_jacobians(S, cam)
        return S, uv, d_cam, d_vert

    def evaluate(self, theta, jacobian: bool):
        n_s = self.n_s
        p, c = theta[:n_s], theta[n_s:]
        try:
            cam = self.params_to_camera(c)
            S, uv, d_cam, d_vert = self.pixel_residual(p, cam)
        except (InvalidParameterError, BehindCameraError):
            return np.inf, None, None
        vi = self.vis_idx
        parts = []
        jparts = []
        if len(vi):
            if jacobian:
                val, grad = bilinear_sample(self.feats, uv[vi], with_gradient=True)
            else:
                val = bilinear_sample(self.feats, uv[vi])
            a = val.ravel() - self.t_mean
            parts.append(self.half_M(a))
            if jacobian:
                # d a / d theta: (nv, C, 2) x (nv, 2, n)
                dxy_dp = np.einsum("nij,njk->nik", d_vert[vi], self.U3[vi])
                Ja = np.concatenate([np.einsum("ncx,nxk->nck", grad, dxy_dp),
                                     np.einsum("ncx,nxk->nck", grad, d_cam[vi])], axis=2)
                jparts.append(self.half_M(Ja.reshape(len(vi) * self.C, -1)))
        L = self.lm.vertex_map
        l = (uv[L] - self.lm.points).ravel()
        parts.append(self.sqrt_cl * l)
        parts.append(self.sqrt_cs * p)
        r = np.concatenate(parts)
        cost = float(r @ r)
        if not jacobian:
            return cost, r, None
        Jl = np.concatenate([np.einsum("nij,njk->nik", d_vert[L], self.U3[L]), d_cam[L]], axis=2)
        jparts.append(self.sqrt_cl * Jl.reshape(2 * len(L), -1))
        Jr = np.zeros((n_s, n_s + 7))
        Jr[:, :n_s] = np.diag(self.sqrt_cs)
        jparts.append(Jr)
        return cost, r, np.vstack(jparts)

    def texture_coefficients(self, theta):
        n_s = self.n_s
        if self.G is None:
            return np.zeros(self.tex.n_components)
        cam = self.params_to_camera(theta[n_s:])
        S = self.shape.instance(theta[:n_s]).reshape(-1, 3)
        uv = project_with_jacobians(S, cam)[0]
        a = bilinear_sample(self.feats, uv[self.vis_idx]).ravel() - self.t_mean
        return np.linalg.solve(self.G, self.Ut.T @ a) / self.k


def fit_3dmm(image: np.ndarray, landmarks: Landmarks2D, model: MorphableModel,
             cfg: FitConfig | None = None, init: tuple | None = None) -> FittingResult:
    """Fit shape, texture and camera to an image with known 2D landmarks.

    Parameters
    ----------
    image : (H, W, 3) float image in [0, 1]
    landmarks : Landmarks2D
    model : MorphableModel
        Shape and texture models on a shared topology; the texture model
        lives in the space of ``cfg.feature_fn`` (3 values per vertex for
        raw RGB, 6 for image gradients).
    cfg : FitConfig
    init : (p, CameraParams), optional
        Defaults to ``p = 0`` and :func:`initial_camera`.
    """
    cfg = cfg or FitConfig()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.size == 0:
        raise FitError("image must be a non-empty H x W x 3 array")
    h, w = image.shape[:2]
    n_vert = model.n_vertices
    landmarks.validate(n_vert)
    feats = feature_image(image, cfg.feature_fn)
    C = feats.shape[2]
    if model.texture.dim != C * n_vert:
        raise FitError(f"texture model has {model.texture.dim} entries; {cfg.feature_fn} needs {C * n_vert}")

    if init is None:
        p0 = np.zeros(model.shape.n_components)
        cam0 = initial_camera(model, landmarks, w, h, cfg.init_focal)
    else:
        p0 = np.asarray(init[0], dtype=np.float64)
        cam0 = init[1]
    if len(p0) != model.shape.n_components:
        raise FitError("initial p has the wrong length")
    pp = cam0.principal_point
    prob = _Problem(feats, landmarks, model, cfg, pp)
    theta = np.concatenate([p0, cam0.to_vector()])

    def refresh_visibility(th):
        S = model.shape.instance(th[:prob.n_s])
        return visibility(S, model.triangles, prob.params_to_camera(th[prob.n_s:]), w, h, cfg.depth_tol)

    try:
        vis = refresh_visibility(theta)
    except (InvalidParameterError, BehindCameraError) as exc:
        raise FitDegenerateError(f"invalid initial camera: {exc}") from exc
    if not vis.any():
        raise FitDegenerateError("no vertex is visible at the initial parameters")
    prob.set_visible(vis)

    cost, r, J = prob.evaluate(theta, jacobian=True)
    if not np.isfinite(cost):
        raise NumericalFailureError("non-finite initial cost", 0)
    trace = [cost]
    reason = "max_iters"
    n_accepted = 0
    it = 0
    for it in range(1, cfg.max_iters + 1):
        if cost == 0.0:
            reason = "zero_cost"
            it -= 1
            break
        if cfg.visibility_every and it > 1 and (it - 1) % cfg.visibility_every == 0:
            new_vis = refresh_visibility(theta)
            if new_vis.any() and not np.array_equal(new_vis, prob.vis):
                old_vis = prob.vis
                prob.set_visible(new_vis)
                c_new, r_new, J_new = prob.evaluate(theta, jacobian=True)
                if c_new <= cost:
                    cost, r, J = c_new, r_new, J_new
                    trace[-1] = cost
                else:
                    prob.set_visible(old_vis)
        if cfg.fix_focal:
            J[:, prob.n_s] = 0.0
        # Gauss-Newton direction with column scaling for conditioning
        scale = np.linalg.norm(J, axis=0)
        scale[scale == 0] = 1.0
        step = -np.linalg.lstsq(J / scale, r, rcond=None)[0] / scale
        if not np.all(np.isfinite(step)):
            raise NumericalFailureError("non-finite Gauss-Newton step", it)
        alpha = 1.0
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            cand = theta + alpha * step
            c_cand, _, _ = prob.evaluate(cand, jacobian=False)
            if np.isnan(c_cand):
                raise NumericalFailureError("non-finite cost", it)
            if c_cand < cost:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            reason = "no_decrease"
            it -= 1
            break
        theta = cand
        n_accepted += 1
        rel = (cost - c_cand) / max(cost, 1e-300)
        cost, r, J = prob.evaluate(theta, jacobian=True)
        if not np.isfinite(cost):
            raise NumericalFailureError("non-finite cost", it)
        trace.append(cost)
        log.debug("iter %d cost %.6g step %.3g", it, cost, alpha)
        if rel < cfg.cost_rel_tol:
            reason = "cost_rel_tol"
            break

    p = theta[:prob.n_s]
    cam = prob.params_to_camera(theta[prob.n_s:])
    lam = prob.texture_coefficients(theta)
    S = model.shape.instance(p).reshape(-1, 3)
    uv = project_with_jacobians(S, cam)[0]
    lm_rms = float(np.sqrt(np.mean(np.sum((uv[landmarks.vertex_map] - landmarks.points) ** 2, axis=1))))
    if len(prob.vis_idx):
        resid = bilinear_sample(feats, uv[prob.vis_idx]).ravel() - model.texture.instance(lam)[prob.tex_rows]
        pix_rms = float(np.sqrt(np.mean(resid ** 2)))
    else:
        pix_rms = float("nan")
    if cfg.feature_fn == "raw-rgb":
        colors, vis_final = sample_texture(image, S, cam, model.triangles, model.texture, cfg.c_t, cfg.depth_tol,
                                           cfg.feature_scale)
    else:
        colors, vis_final = sample_texture(image, S, cam, model.triangles, None, cfg.c_t, cfg.depth_tol)
    converged = reason in ("cost_rel_tol", "zero_cost", "no_decrease") or lm_rms <= cfg.landmark_rms_tol
    return FittingResult(p.copy(), lam, cam, colors, vis_final, trace, converged, reason, it, n_accepted,
                         lm_rms, pix_rms)


def fit_cost_terms(result: FittingResult, image, landmarks: Landmarks2D, model: MorphableModel,
                   cfg: FitConfig | None = None) -> dict:
    """The four terms of the fitting cost at a result, with its final visibility."""
    cfg = cfg or FitConfig()
    feats = feature_image(image, cfg.feature_fn)
    S = model.shape.instance(result.p).reshape(-1, 3)
    uv = project_with_jacobians(S, result.camera)[0]
    C = feats.shape[2]
    idx = np.flatnonzero(result.visible)
    rows = (idx[:, None] * C + np.arange(C)).ravel()
    pix = bilinear_sample(feats, uv[idx]).ravel() - model.texture.instance(result.lam)[rows]
    lm = uv[landmarks.vertex_map] - landmarks.points
    return {"pixel": float(pix @ pix), "landmark": cfg.c_l * float(np.sum(lm ** 2)),
            "shape_reg": cfg.c_s * float(np.sum(result.p ** 2 / model.shape.eigenvalues)),
            "texture_reg": cfg.c_t * float(np.sum(result.lam ** 2 / model.texture.eigenvalues))}
