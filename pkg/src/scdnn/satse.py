"""Soft-adaptive threshold spectral enhancement.

A SATSE block transforms each channel of a (B, C, L) feature map to the
frequency domain, splits the spectrum into a low- and a high-frequency
branch with complementary sigmoid masks, mixes bins with a trainable
complex weight per (channel, bin), returns both branches to the time
domain, and adds them back onto the input:

    out = f + lambda_low * real(idft(W * sigma_low(j) * dft(f)))
            + lambda_high * real(idft(W * sigma_high(j) * dft(f)))

The masks are logistic ramps over the bin index with trainable cutoff
ratio `phi` (cutoff bin = phi * L) and slope `gamma`:

    sigma_high(x) = 1 / (1 + exp(gamma * (-x + phi * L)))
    sigma_low(x)  = 1 - sigma_high(x)

Because the ramps are smooth, phi and gamma receive exact gradients, which
is the whole point: a hard 0/1 cutoff has zero derivative almost
everywhere and cannot be trained.

Bin indexing comes in two flavours. In ``symmetric`` mode (default) the
mask argument is min(j, L - j), the unsigned frequency of bin j, so masks
are conjugate-symmetric and filtered versions of a real signal stay real
to rounding. ``literal`` mode uses the raw index j; the upper half of the
spectrum then counts as "high" even though it mirrors low frequencies,
and realness is restored only by the real-part extraction after the
inverse transform.
"""

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    as_complex,
    mul,
    real_part,
    reshape,
    sigmoid,
    stable_sigmoid,
    sub,
)
from .spectral import dft_t, idft_t

__all__ = [
    "MASK_INDEX_MODES",
    "PHI_MIN",
    "PHI_MAX",
    "GAMMA_MIN",
    "effective_bins",
    "soft_mask",
    "hard_mask",
    "SatseBlock",
    "satse_forward",
    "satse_param_report",
]

MASK_INDEX_MODES = ("literal", "symmetric")

# Post-step clamp bounds: phi may approach but never reach 0 or 1, and the
# sigmoid slope stays positive.
PHI_MIN = 1e-3
PHI_MAX = 1.0 - 1e-3
GAMMA_MIN = 1e-3


def effective_bins(length, mode="symmetric"):
    """Mask argument per bin: j in literal mode, min(j, L - j) in symmetric."""
    if mode not in MASK_INDEX_MODES:
        raise ValueError(f"unknown mask index mode {mode!r}")
    j = np.arange(length, dtype=np.float64)
    if mode == "symmetric":
        return np.minimum(j, length - j)
    return j


def _effective(j, length, mode):
    x = np.asarray(j, dtype=np.float64)
    if mode not in MASK_INDEX_MODES:
        raise ValueError(f"unknown mask index mode {mode!r}")
    if mode == "symmetric":
        x = np.minimum(x, length - x)
    return x


def soft_mask(j, phi, gamma, length, side, mode="symmetric"):
    """Sigmoid frequency weight in (0, 1) for bin(s) j.

    side="high" passes bins above the cutoff phi * length, side="low" is
    its exact complement.
    """
    x = _effective(j, length, mode)
    high = stable_sigmoid(gamma * (x - phi * length))
    if side == "high":
        out = high
    elif side == "low":
        out = 1.0 - high
    else:
        raise ValueError(f"mask side must be 'low' or 'high', got {side!r}")
    return out if out.ndim else float(out)


def hard_mask(j, phi, length, side, mode="symmetric"):
    """0/1 cutoff at phi * length: the infinite-slope limit of soft_mask."""
    x = _effective(j, length, mode)
    low = (x <= phi * length).astype(np.float64)
    if side == "low":
        out = low
    elif side == "high":
        out = 1.0 - low
    else:
        raise ValueError(f"mask side must be 'low' or 'high', got {side!r}")
    return out if out.ndim else float(out)


class SatseBlock:
    """Trainable spectral enhancement for one (channels, length) feature map.

    Parameters: scalar cutoff ratio `phi`, scalar slope `gamma`, complex
    per-(channel, bin) weight stored as paired real leaves, and the two
    branch coefficients `lambda_low` / `lambda_high` (optionally shared
    tensors passed in by the caller).
    """

    def __init__(self, channels, length, *, phi_init=0.4, gamma_init=0.5,
                 lambda_init=0.0, mask_index_mode="symmetric", train_phi=True,
                 dtype=np.float64, lambda_low=None, lambda_high=None):
        if mask_index_mode not in MASK_INDEX_MODES:
            raise ValueError(f"unknown mask index mode {mask_index_mode!r}")
        if not 0.0 < phi_init < 1.0:
            raise ValueError(f"phi_init must lie in (0, 1), got {phi_init}")
        self.channels = channels
        self.length = length
        self.mask_index_mode = mask_index_mode
        self.phi = Tensor(np.asarray(phi_init, dtype), requires_grad=train_phi)
        self.gamma = Tensor(np.asarray(gamma_init, dtype), requires_grad=True)
        self.weight_re = Tensor(np.ones((channels, length), dtype),
                                requires_grad=True)
        self.weight_im = Tensor(np.zeros((channels, length), dtype),
                                requires_grad=True)
        self.lambda_low = (
            lambda_low
            if lambda_low is not None
            else Tensor(np.asarray(lambda_init, dtype), requires_grad=True)
        )
        self.lambda_high = (
            lambda_high
            if lambda_high is not None
            else Tensor(np.asarray(lambda_init, dtype), requires_grad=True)
        )

    def forward(self, x, swap_roles=False):
        """Apply the block to a (B, C, L) Tensor; output has the same shape.

        `swap_roles` exchanges which mask and which lambda feed each branch;
        by symmetry of the combination the output is unchanged bit for bit.
        """
        if x.data.ndim != 3:
            raise ShapeError(f"satse expects a (B, C, L) input, got {x.data.shape}")
        b, c, length = x.data.shape
        if c != self.channels or length != self.length:
            raise ShapeError(
                f"satse block built for (C={self.channels}, L={self.length}) "
                f"got input (C={c}, L={length}); pad or rebuild"
            )
        bins = Tensor(
            effective_bins(length, self.mask_index_mode).astype(self.phi.dtype)
        )
        arg = mul(self.gamma, sub(bins, mul(self.phi, float(length))))
        mask_high = sigmoid(arg)
        mask_low = sub(1.0, mask_high)

        spec = dft_t(x)
        weight = reshape(as_complex(self.weight_re, self.weight_im),
                         (1, c, length))

        def branch(mask):
            filtered = mul(mul(spec, reshape(mask, (1, 1, length))), weight)
            return real_part(idft_t(filtered))

        if swap_roles:
            low_gain, high_gain = self.lambda_high, self.lambda_low
            low_mask, high_mask = mask_high, mask_low
        else:
            low_gain, high_gain = self.lambda_low, self.lambda_high
            low_mask, high_mask = mask_low, mask_high

        enhancement = add(mul(low_gain, branch(low_mask)),
                          mul(high_gain, branch(high_mask)))
        out = add(x, enhancement)
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError("satse output contains non-finite values")
        return out

    def parameters(self):
        return {
            "phi": self.phi,
            "gamma": self.gamma,
            "weight_re": self.weight_re,
            "weight_im": self.weight_im,
            "lambda_low": self.lambda_low,
            "lambda_high": self.lambda_high,
        }

    def clamp(self):
        """Post-optimizer-step projection of phi and gamma onto valid ranges."""
        if self.phi.requires_grad:
            np.clip(self.phi.data, PHI_MIN, PHI_MAX, out=self.phi.data)
        np.clip(self.gamma.data, GAMMA_MIN, None, out=self.gamma.data)

    def report(self):
        """Read-only scalar snapshot used for trace logging."""
        w = self.weight_re.data + 1j * self.weight_im.data
        return {
            "phi": float(self.phi.data),
            "gamma": float(self.gamma.data),
            "lambda_low": float(self.lambda_low.data),
            "lambda_high": float(self.lambda_high.data),
            "weight_norms": {
                "l2": float(np.sqrt((np.abs(w) ** 2).sum())),
                "max_abs": float(np.abs(w).max()),
            },
        }


def satse_forward(x, block, swap_roles=False):
    return block.forward(x, swap_roles=swap_roles)


def satse_param_report(block):
    return block.report()
