"""Image-set evaluation: SSIM, Frechet distance and kernel distance.

All statistics are computed in float64. The feature space for FID/KID
comes from a pluggable embedder; the built-in default is a seeded
random-projection network so runs are comparable within a series
without shipping pretrained weights (the descriptor is recorded in
every report).
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .errors import ContractError, NumericError, ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2  # (K1 * L)^2 with L = 1
SSIM_C2 = 0.03**2

CSV_HEADER = (
    "run_id,ratio,lr_setting,ssim_percent,fid,kid_mean,kid_variance,n_images,embedder"
)


# ---------------------------------------------------------------------------
# SSIM


def _gaussian_window(size, sigma):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _luminance(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 1:
        return img[0]
    if img.ndim == 3 and img.shape[0] == 3:
        return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    raise ShapeError(f"expected (H,W), (1,H,W) or (3,H,W) image, got {img.shape}")


def ssim(x, y):
    """Mean local structural similarity of two [0,1] images.

    Gaussian 11x11 window (sigma 1.5), valid-region sliding statistics,
    3-channel inputs reduced to luminance first. Symmetric in x and y.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ShapeError(f"ssim operands differ in shape: {x.shape} vs {y.shape}")
    lx, ly = _luminance(x), _luminance(y)
    h, w = lx.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ContractError(
            f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)

    def local_mean(img):
        views = sliding_window_view(img, (SSIM_WINDOW, SSIM_WINDOW))
        return np.einsum("ijkl,kl->ij", views, win)

    mu_x = local_mean(lx)
    mu_y = local_mean(ly)
    var_x = local_mean(lx * lx) - mu_x * mu_x
    var_y = local_mean(ly * ly) - mu_y * mu_y
    cov = local_mean(lx * ly) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    # anti-correlated windows can push the raw mean below zero; the
    # declared range is [0, 1]
    return max(0.0, float(np.mean(num / den)))


# ---------------------------------------------------------------------------
# Frechet distance between Gaussian fits


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray


def gaussian_stats(features):
    """Sample mean and ddof=1 covariance of an [N, d] feature matrix."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ShapeError(f"expected [N, d] features, got {feats.shape}")
    if feats.shape[0] < 2:
        raise ContractError(f"need at least 2 feature rows, got {feats.shape[0]}")
    mu = feats.mean(axis=0)
    sigma = np.atleast_2d(np.cov(feats, rowvar=False, ddof=1))
    asym = np.abs(sigma - sigma.T).max()
    if asym > 1e-9:
        raise NumericError(f"covariance asymmetry {asym:.3e} exceeds tolerance")
    return GaussianStats(mu, (sigma + sigma.T) / 2.0)


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(a: GaussianStats, b: GaussianStats):
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The cross term is evaluated as Tr(C^(1/2)) with
    C = S_a^(1/2) S_b S_a^(1/2), keeping every eigensolve on a symmetric
    matrix; eigenvalues below 1e-10 are clamped to zero.
    """
    if a.mu.shape != b.mu.shape:
        raise ShapeError(f"stat dims differ: {a.mu.shape} vs {b.mu.shape}")
    try:
        root_a = _psd_sqrt(a.sigma)
        c = root_a @ b.sigma @ root_a
        c = (c + c.T) / 2.0
        cvals = np.linalg.eigvalsh(c)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"eigensolve failed: {e}") from e
    cvals = np.where(cvals < 1e-10, 0.0, cvals)
    tr_cross = np.sqrt(cvals).sum()
    diff = a.mu - b.mu
    return float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_cross)


# ---------------------------------------------------------------------------
# Kernel distance (unbiased MMD^2, degree-3 polynomial kernel)


def _poly_kernel(u, v):
    d = u.shape[1]
    return (u @ v.T / d + 1.0) ** 3


def mmd2_unbiased(xs, ys):
    """Unbiased squared MMD of two equal-size feature sets."""
    b = xs.shape[0]
    if b < 2 or ys.shape[0] != b:
        raise ContractError("mmd2 needs two equal sets of at least 2 rows")
    kxx = _poly_kernel(xs, xs)
    kyy = _poly_kernel(ys, ys)
    kxy = _poly_kernel(xs, ys)
    off_x = (kxx.sum() - np.trace(kxx)) / (b * (b - 1))
    off_y = (kyy.sum() - np.trace(kyy)) / (b * (b - 1))
    return float(off_x + off_y - 2.0 * kxy.mean())


def kid(x_features, y_features, subset_size=None, num_subsets=10, seed=0):
    """(mean, variance) of MMD^2 over seeded row subsets of each set.

    Per subset, ``subset_size`` rows are drawn without replacement from
    each feature matrix. Variance is the population variance of the
    subset estimates (zero for a single subset).
    """
    xs = np.asarray(x_features, dtype=np.float64)
    ys = np.asarray(y_features, dtype=np.float64)
    if xs.ndim != 2 or ys.ndim != 2 or xs.shape[1] != ys.shape[1]:
        raise ShapeError(f"feature shapes incompatible: {xs.shape} vs {ys.shape}")
    m, mp = xs.shape[0], ys.shape[0]
    if m < 2 or mp < 2:
        raise ContractError("kid needs at least 2 rows in each set")
    if num_subsets < 1:
        raise ContractError(f"need at least one subset, got {num_subsets}")
    b = min(100, m, mp) if subset_size is None else int(subset_size)
    if b > min(m, mp):
        raise ContractError(f"subset size {b} exceeds available rows {min(m, mp)}")
    if b < 2:
        raise ContractError(f"subset size must be >= 2, got {b}")
    rng = np.random.default_rng(seed)
    estimates = np.empty(num_subsets, dtype=np.float64)
    for i in range(num_subsets):
        xi = rng.choice(m, size=b, replace=False)
        yi = rng.choice(mp, size=b, replace=False)
        estimates[i] = mmd2_unbiased(xs[xi], ys[yi])
    return float(estimates.mean()), float(estimates.var())


# ---------------------------------------------------------------------------
# feature embedder


class RandomProjectionEmbedder:
    """Fixed seeded conv->relu->conv->relu->global-mean projection.

    Weights are drawn once from the seed; the same descriptor always
    produces identical vectors, so scores are comparable within a run
    series that shares the descriptor.
    """

    def __init__(self, dim=64, seed=0, hidden=16):
        rng = np.random.default_rng(np.random.PCG64(seed))
        self.dim = int(dim)
        self.seed = int(seed)
        scale1 = 1.0 / np.sqrt(3 * 9)
        scale2 = 1.0 / np.sqrt(hidden * 9)
        self._w1 = rng.normal(0.0, scale1, size=(hidden, 3, 3, 3)).astype(np.float32)
        self._w2 = rng.normal(0.0, scale2, size=(dim, hidden, 3, 3)).astype(np.float32)

    @property
    def descriptor(self):
        return f"randproj:d={self.dim}:seed={self.seed}"

    def embed(self, images):
        """[N, dim] float64 embedding of a batch of (3, H, W) images."""
        batch = np.stack([np.asarray(im, dtype=np.float32) for im in images])
        if batch.ndim != 4 or batch.shape[1] != 3:
            raise ShapeError(f"expected (3,H,W) images, got batch {batch.shape}")
        h1 = ad.relu(ad.conv2d(ad.Tensor(batch), ad.Tensor(self._w1), stride=2, pad=1))
        h2 = ad.relu(ad.conv2d(h1, ad.Tensor(self._w2), stride=2, pad=1))
        return h2.data.mean(axis=(2, 3), dtype=np.float64)


# ---------------------------------------------------------------------------
# run-level report


@dataclass
class MetricReport:
    run_id: str
    ssim_percent: float
    fid: float
    kid_mean: float
    kid_variance: float
    n_images: int
    embedder: str
    ratio: str = ""
    lr_setting: str = ""

    def __post_init__(self):
        if not 0.0 <= self.ssim_percent <= 100.0:
            raise ContractError(f"ssim_percent out of range: {self.ssim_percent}")
        if self.fid < 0:
            raise ContractError(f"fid must be non-negative, got {self.fid}")
        if self.n_images < 2:
            raise ContractError(f"need at least 2 images, got {self.n_images}")

    def to_csv_row(self):
        return (
            f"{self.run_id},{self.ratio},{self.lr_setting},"
            f"{self.ssim_percent!r},{self.fid!r},{self.kid_mean!r},"
            f"{self.kid_variance!r},{self.n_images},{self.embedder}"
        )

    @classmethod
    def from_csv_row(cls, row):
        parts = row.strip().split(",")
        if len(parts) != 9:
            raise ContractError(f"expected 9 csv fields, got {len(parts)}")
        return cls(
            run_id=parts[0],
            ratio=parts[1],
            lr_setting=parts[2],
            ssim_percent=float(parts[3]),
            fid=float(parts[4]),
            kid_mean=float(parts[5]),
            kid_variance=float(parts[6]),
            n_images=int(parts[7]),
            embedder=parts[8],
        )

    def to_text(self):
        return (
            f"run_id={self.run_id} ratio={self.ratio} lr_setting={self.lr_setting}\n"
            f"ssim_percent={self.ssim_percent!r}\n"
            f"fid={self.fid!r}\n"
            f"kid_mean={self.kid_mean!r}\n"
            f"kid_variance={self.kid_variance!r}\n"
            f"n_images={self.n_images}\n"
            f"embedder={self.embedder}\n"
        )


def _canonical_order(features):
    # content-based order: makes subset draws independent of input order
    return features[np.lexsort(features.T[::-1])]


def evaluate_run(
    generated,
    targets,
    embedder=None,
    *,
    run_id="run",
    ratio="",
    lr_setting="",
    kid_subsets=10,
    kid_subset_size=None,
    seed=0,
):
    """Score a generated image list against its paired targets.

    Images are [-1, 1] arrays of shape (3, H, W); SSIM is computed
    pairwise after rescaling to [0, 1], FID/KID over the embedded
    feature sets (row order canonicalized before subset draws).
    """
    if len(generated) == 0 or len(targets) == 0:
        raise ContractError("evaluate_run needs non-empty image lists")
    if len(generated) != len(targets):
        raise ShapeError(
            f"paired lists differ in length: {len(generated)} vs {len(targets)}"
        )
    if len(generated) < 2:
        raise ContractError("need at least 2 image pairs for fid/kid")
    embedder = embedder or RandomProjectionEmbedder()

    scores = [
        ssim(np.clip((g + 1.0) / 2.0, 0.0, 1.0), np.clip((t + 1.0) / 2.0, 0.0, 1.0))
        for g, t in zip(generated, targets)
    ]
    ssim_percent = 100.0 * float(np.mean(scores))

    feats_g = _canonical_order(embedder.embed(generated))
    feats_t = _canonical_order(embedder.embed(targets))
    dist = fid(gaussian_stats(feats_g), gaussian_stats(feats_t))
    if dist < 0:  # eigensolver noise near a perfect score
        dist = 0.0
    kid_mean, kid_var = kid(
        feats_g, feats_t, subset_size=kid_subset_size, num_subsets=kid_subsets, seed=seed
    )
    return MetricReport(
        run_id=run_id,
        ssim_percent=min(max(ssim_percent, 0.0), 100.0),
        fid=dist,
        kid_mean=kid_mean,
        kid_variance=kid_var,
        n_images=len(generated),
        embedder=embedder.descriptor,
        ratio=ratio,
        lr_setting=lr_setting,
    )
