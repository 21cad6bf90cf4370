"""Denoising-diffusion machinery: lossless latent codec, noise schedules,
network preconditioning, v-space targets, and the guided Euler sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadParamsError, BadShapeError, ZeroSigmaError

SIGMA_DATA = 0.5
SIGMA_MIN = 0.02
SIGMA_MAX = 80.0
RHO = 7.0
LATENT_FACTOR = 4
DEFAULT_STEPS = 30
DEFAULT_GUIDANCE = 2.0


# ---------------------------------------------------------------------------
# latent codec: invertible space-to-depth with an affine value remap
# ---------------------------------------------------------------------------

def latent_encode(image: np.ndarray, factor: int = LATENT_FACTOR) -> np.ndarray:
    """[H, W, 3] image in [0,1] -> [H/f, W/f, 3*f^2] latent in [-1, 1].

    Pixels are regrouped losslessly (space to depth) and remapped to zero
    mean; decode inverts both steps exactly.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise BadShapeError(f"expected [H, W, 3] image, got {image.shape}")
    H, W, _ = image.shape
    if H % factor or W % factor:
        raise BadShapeError(f"image size {H}x{W} not divisible by factor {factor}")
    h, w = H // factor, W // factor
    latent = image.reshape(h, factor, w, factor, 3).transpose(0, 2, 1, 3, 4)
    latent = latent.reshape(h, w, factor * factor * 3)
    return latent * 2.0 - 1.0


def latent_decode(latent: np.ndarray, factor: int = LATENT_FACTOR) -> np.ndarray:
    """Exact inverse of latent_encode; output clipped to [0, 1]."""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 3 or latent.shape[2] != 3 * factor * factor:
        raise BadShapeError(
            f"expected [h, w, {3 * factor * factor}] latent, got {latent.shape}"
        )
    h, w, _ = latent.shape
    image = (latent + 1.0) * 0.5
    image = image.reshape(h, w, factor, factor, 3).transpose(0, 2, 1, 3, 4)
    return np.clip(image.reshape(h * factor, w * factor, 3), 0.0, 1.0)


# ---------------------------------------------------------------------------
# schedules and preconditioning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SigmaSchedule:
    """Strictly decreasing noise levels ending at exactly zero."""

    sigmas: np.ndarray
    sigma_min: float
    sigma_max: float
    rho: float

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        if len(s) < 2 or s[-1] != 0.0 or np.any(np.diff(s) >= 0):
            raise BadParamsError("schedule must be strictly decreasing and end at 0")
        object.__setattr__(self, "sigmas", s)

    def __len__(self) -> int:
        return len(self.sigmas)


def sigma_schedule(
    n_steps: int = DEFAULT_STEPS,
    sigma_min: float = SIGMA_MIN,
    sigma_max: float = SIGMA_MAX,
    rho: float = RHO,
) -> SigmaSchedule:
    """Power-rho interpolation from sigma_max to sigma_min plus a final 0."""
    if n_steps < 1 or not (0 < sigma_min < sigma_max) or rho <= 0:
        raise BadParamsError(
            f"bad schedule parameters: n={n_steps}, min={sigma_min}, max={sigma_max}, rho={rho}"
        )
    if n_steps == 1:
        sigmas = np.array([sigma_max, 0.0])
    else:
        i = np.arange(n_steps)
        inv = 1.0 / rho
        sigmas = (
            sigma_max**inv + i / (n_steps - 1) * (sigma_min**inv - sigma_max**inv)
        ) ** rho
        sigmas = np.concatenate([sigmas, [0.0]])
    return SigmaSchedule(sigmas, sigma_min, sigma_max, rho)


@dataclass(frozen=True)
class Precondition:
    """Input/output scalings of the denoiser at one noise level."""

    c_skip: float
    c_out: float
    c_in: float
    c_noise: float


def precondition(sigma: float, sigma_data: float = SIGMA_DATA,
                 sigma_min: float = SIGMA_MIN) -> Precondition:
    """Scalings that keep the network's input and target unit-variance.

    At sigma == 0 the denoiser reduces to the identity (c_skip=1, c_out=0);
    c_noise falls back to log(sigma_min) there.
    """
    if sigma < 0:
        raise BadParamsError(f"sigma must be >= 0, got {sigma}")
    s2 = sigma * sigma + sigma_data * sigma_data
    return Precondition(
        c_skip=sigma_data * sigma_data / s2,
        c_out=sigma * sigma_data / np.sqrt(s2),
        c_in=1.0 / np.sqrt(s2),
        c_noise=0.25 * np.log(sigma if sigma > 0 else sigma_min),
    )


def v_target(z0: np.ndarray, eps: np.ndarray, sigma: float,
             sigma_data: float = SIGMA_DATA) -> np.ndarray:
    """Network target whose prediction makes the denoiser output exactly z0.

    v = (z0 - c_skip * (z0 + sigma * eps)) / c_out; an affine combination of
    the clean sample and the noise at fixed sigma.
    """
    if sigma <= 0:
        raise ZeroSigmaError("v target undefined at sigma <= 0")
    pre = precondition(sigma, sigma_data)
    z_t = z0 + sigma * eps
    return (z0 - pre.c_skip * z_t) / pre.c_out


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def euler_sample(
    denoise_fn,
    shape: tuple,
    schedule: SigmaSchedule,
    guidance_scale: float = DEFAULT_GUIDANCE,
    rng: np.random.Generator | int | None = None,
    cond=None,
):
    """Deterministic Euler integration of the probability-flow ODE.

    denoise_fn(z, sigma, cond) must return the denoised estimate D with the
    same shape as z; cond=None requests the unconditional branch. With
    guidance_scale != 1 both branches are evaluated and extrapolated:
    D = D_uncond + scale * (D_cond - D_uncond).
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    sigmas = schedule.sigmas
    z = sigmas[0] * rng.standard_normal(shape)
    guided = guidance_scale != 1.0 and cond is not None
    for i in range(len(sigmas) - 1):
        s, s_next = sigmas[i], sigmas[i + 1]
        if guided:
            d_cond = denoise_fn(z, s, cond)
            d_uncond = denoise_fn(z, s, None)
            d = d_uncond + guidance_scale * (d_cond - d_uncond)
        else:
            d = denoise_fn(z, s, cond)
        z = z + (s_next - s) * (z - d) / s
    return z


def sample_training_sigma(
    rng: np.random.Generator,
    log_mean: float = -1.2,
    log_std: float = 1.2,
) -> float:
    """Log-normal draw of the training noise level."""
    return float(np.exp(rng.normal(log_mean, log_std)))


# ---------------------------------------------------------------------------
# frame bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class LatentFrame:
    """One frame of the latent sequence fed to the denoiser.

    References carry their clean latent at sigma 0 and repeat it in the
    condition slot; targets carry a (noisy) latent and either zeros or a
    rendered-scene latent in the condition slot.
    """

    latent: np.ndarray
    role: str                      # "reference" | "target"
    sigma: float = 0.0
    cond: np.ndarray | None = None
    index: int = 0                 # position along the camera trajectory

    def __post_init__(self):
        if self.role not in ("reference", "target"):
            raise BadParamsError(f"unknown frame role: {self.role}")
        self.latent = np.asarray(self.latent, dtype=np.float64)
        if self.role == "reference":
            if self.sigma != 0.0:
                raise BadParamsError("reference frames must have sigma == 0")
            if self.cond is None:
                self.cond = self.latent
        elif self.cond is None:
            self.cond = np.zeros_like(self.latent)
        self.cond = np.asarray(self.cond, dtype=np.float64)
        if self.cond.shape != self.latent.shape:
            raise BadShapeError(
                f"condition slot {self.cond.shape} != latent {self.latent.shape}"
            )

    @property
    def is_reference(self) -> bool:
        return self.role == "reference"
