"""Independent brute-force reference implementations.

Everything here recomputes results from first principles: direct-summation
DFT, central finite differences, Jacobi eigen-iteration, Monte-Carlo
moments.  None of it reuses the fast code paths it is used to check, so a
bug in the main build and its oracle would have to be two separate bugs.
"""

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class ToleranceReport:
    """Outcome of one verification check."""

    name: str
    max_abs_error: float
    max_rel_error: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name}: max_abs={self.max_abs_error:.3e} "
            f"max_rel={self.max_rel_error:.3e} tol={self.tolerance:g}"
        )


def _oracle_hann(size: int):
    return [0.5 * (1.0 - math.cos(2.0 * math.pi * n / (size - 1))) for n in range(size)]


def dft_oracle_full(frame) -> np.ndarray:
    """All 254 magnitude bins of one Hann-windowed frame, by direct summation."""
    frame = list(np.asarray(frame, dtype=np.float64))
    size = len(frame)
    if size != 254:
        raise ValueError(f"expected a 254-sample frame, got {size}")
    window = _oracle_hann(size)
    windowed = [frame[n] * window[n] for n in range(size)]
    mags = []
    for k in range(size):
        re = 0.0
        im = 0.0
        for n in range(size):
            angle = 2.0 * math.pi * k * n / size
            re += windowed[n] * math.cos(angle)
            im -= windowed[n] * math.sin(angle)
        mags.append(math.hypot(re, im))
    return np.array(mags)


def dft_oracle(frame) -> np.ndarray:
    """Magnitudes of bins 0..127 of one Hann-windowed 254-sample frame."""
    return dft_oracle_full(frame)[:128]


def windowed_energy(frame) -> float:
    """Sum of squared Hann-windowed samples, for the Parseval cross-check."""
    frame = list(np.asarray(frame, dtype=np.float64))
    window = _oracle_hann(len(frame))
    return math.fsum((x * w) ** 2 for x, w in zip(frame, window))


def finite_difference_grad(loss_fn, params, step: float = 1e-3,
                           max_coords: int | None = None, seed: int = 0):
    """Central-difference gradients of a scalar loss, one coordinate at a time.

    params is a sequence of objects with a mutable float64 .data array; the
    loss is re-evaluated with each coordinate nudged by +-step.  Returns one
    gradient array per parameter.  For large parameters max_coords limits
    the sweep to a seeded random coordinate subset; untested coordinates
    are NaN (and skipped by gradient_report).
    """
    pick = np.random.default_rng(seed)
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(pick.choice(flat.size, size=max_coords, replace=False))
            grad = np.full(flat.shape, np.nan)
        else:
            coords = range(flat.size)
            grad = np.zeros(flat.shape, dtype=np.float64)
        for i in coords:
            original = flat[i]
            flat[i] = original + step
            up = float(loss_fn())
            flat[i] = original - step
            down = float(loss_fn())
            flat[i] = original
            if not (math.isfinite(up) and math.isfinite(down)):
                raise ValueError(f"non-finite loss while differencing {p!r}[{i}]")
            grad[i] = (up - down) / (2.0 * step)
        grads.append(grad.reshape(p.data.shape))
    return grads


def gradient_report(name, analytic, numeric, rel_tol: float = 1e-3,
                    abs_floor: float = 1e-6) -> ToleranceReport:
    """Compare analytic and finite-difference gradients coordinate-wise.

    A coordinate passes when the absolute error is under abs_floor or the
    error relative to the larger magnitude is under rel_tol.
    """
    max_abs = 0.0
    max_rel = 0.0
    ok = True
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        n = np.asarray(n, dtype=np.float64).reshape(-1)
        tested = np.isfinite(n)  # NaN marks coordinates the sweep skipped
        a, n = a[tested], n[tested]
        diff = np.abs(a - n)
        denom = np.maximum(np.abs(a), np.abs(n))
        rel = diff / np.maximum(denom, 1e-30)
        max_abs = max(max_abs, float(diff.max(initial=0.0)))
        max_rel = max(max_rel, float(rel.max(initial=0.0)))
        bad = (diff > abs_floor) & (rel > rel_tol)
        if np.any(bad):
            ok = False
    return ToleranceReport(name, max_abs, max_rel, rel_tol, ok)


def singular_value_oracle(matrix, tol: float = 1e-8) -> float:
    """Largest singular value via cyclic Jacobi iteration on the Gram matrix."""
    w = np.asarray(matrix, dtype=np.float64)
    if w.ndim != 2:
        w = w.reshape(w.shape[0], -1)
    if not np.all(np.isfinite(w)):
        raise ValueError("matrix contains non-finite entries")
    a = w @ w.T if w.shape[0] <= w.shape[1] else w.T @ w
    a = a.copy()
    n = a.shape[0]
    scale = np.linalg.norm(a) + 1e-300
    for _ in range(60):
        off = math.sqrt(max(0.0, (a * a).sum() - (np.diag(a) ** 2).sum()))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:  # tan(2phi) huge: rotation angle ~ 1/(2*theta)
                    t = 1.0 / (2.0 * theta)
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.array([[c, s], [-s, c]])
                a[[p, q], :] = rot.T @ a[[p, q], :]
                a[:, [p, q]] = a[:, [p, q]] @ rot
    return math.sqrt(max(0.0, float(np.diag(a).max())))


def gaussian_moment_oracle(mu: float, s: float, n: int, seed: int, sampler=None):
    """Empirical (mean, variance, below-mean fraction) of the Gaussian sampler.

    Draws n un-clamped samples and accumulates moments by direct summation.
    sampler(mu, s, rng) defaults to the vocoder's sample_gaussian with
    clamping disabled.
    """
    if n < 10000:
        raise ValueError(f"need at least 10000 draws for stable moments, got {n}")
    if sampler is None:
        from .vocoder import GaussianOut, sample_gaussian

        def sampler(mu, s, rng):
            return sample_gaussian(GaussianOut(mu, s), rng, clamp=False)

    rng = np.random.default_rng(seed)
    draws = [float(sampler(mu, s, rng)) for _ in range(n)]
    mean = math.fsum(draws) / n
    variance = math.fsum((d - mean) ** 2 for d in draws) / n
    below = sum(1 for d in draws if d < mu) / n
    return mean, variance, below


# ---------------------------------------------------------------------------
# the aggregated verification suite behind `cyclevc verify`


def randomize_parameters(params, rng, weight_scale: float = 3.0, bias_range: float = 0.3):
    """Move parameters to a generic position for gradient checking.

    Fresh inits put some activations within a finite-difference step of the
    piecewise-linear kinks (untrained generators emit near-zero grids),
    where central differences are meaningless.  Wider fan-in-scaled weights
    and nonzero biases avoid that without changing what is being checked.
    """
    for p in params:
        if p.data.ndim >= 2:
            fan_in = int(np.prod(p.data.shape[1:]))
            p.data[...] = rng.uniform(-1, 1, p.data.shape) * weight_scale / np.sqrt(fan_in)
        else:
            p.data[...] = rng.uniform(-bias_range, bias_range, p.data.shape)


def random_gapped_matrix(rng, rows: int, cols: int, gap: float = 0.9):
    """A random matrix with known singular values and a bounded ratio
    sigma2/sigma1 <= gap; returns (matrix, sigma1).

    Plain Gaussian matrices routinely have sigma2/sigma1 > 0.97, which no
    50-step power iteration can resolve to 1e-4 from a random start, so
    convergence checks use this controlled ensemble instead.
    """
    k = min(rows, cols)
    left, _ = np.linalg.qr(rng.standard_normal((rows, k)))
    right, _ = np.linalg.qr(rng.standard_normal((cols, k)))
    sigma1 = float(rng.uniform(0.5, 5.0))
    rest = np.sort(rng.uniform(0.02, gap, size=k - 1))[::-1] * sigma1
    values = np.concatenate([[sigma1], rest])
    return (left * values) @ right.T, sigma1


def _grad_check(name, build, corrupt):
    """Run one finite-difference comparison; build() -> (loss_fn, params,
    analytic_fn, max_coords).  corrupt perturbs the analytic side to prove
    the check can fail."""
    loss_fn, params, analytic_fn, max_coords = build()
    numeric = finite_difference_grad(loss_fn, params, step=1e-3, max_coords=max_coords)
    analytic = analytic_fn()
    if corrupt == name:
        analytic = [a + 0.05 for a in analytic]
    return gradient_report(name, analytic, numeric)


def run_verification(corrupt: str | None = None):
    """Run every oracle suite and return the list of ToleranceReports.

    corrupt names a check whose analytic side is deliberately perturbed,
    to demonstrate a failing report (test fixture for the exit path).
    """
    from . import autodiff as ad
    from . import nn
    from .audio import stft
    from .converter import (ConverterConfig, ConverterPair, _to_net_layout,
                            _trim_time, discriminator_loss, generator_loss)
    from .vocoder import GaussianOut, VocoderConfig, VocoderNet, gaussian_nll, nll_graph

    reports = []
    rng = np.random.default_rng(20240416)

    # STFT against the direct-summation DFT
    max_rel = 0.0
    for _ in range(5):
        wave = rng.uniform(-0.9, 0.9, size=254)
        got = stft(wave)[0]
        want = dft_oracle(wave)
        rel = np.abs(got - want) / np.maximum(np.abs(want), 1e-9)
        max_rel = max(max_rel, float(rel.max()))
    reports.append(ToleranceReport("stft_vs_dft_oracle", max_rel, max_rel, 1e-6,
                                   max_rel <= 1e-6))

    # sinusoid peak bins
    misses = 0
    for k in rng.choice(np.arange(1, 127), size=10, replace=False):
        wave = np.sin(2.0 * np.pi * k * np.arange(254) / 254.0)
        if int(np.argmax(stft(wave)[0])) != int(k):
            misses += 1
    reports.append(ToleranceReport("stft_sinusoid_peaks", float(misses), float(misses),
                                   0.0, misses == 0))

    # Parseval on the full 254-bin spectrum
    frame = rng.uniform(-1.0, 1.0, size=254)
    spectrum_energy = float(np.sum(dft_oracle_full(frame) ** 2))
    sample_energy = 254.0 * windowed_energy(frame)
    parseval_rel = abs(spectrum_energy - sample_energy) / sample_energy
    reports.append(ToleranceReport("stft_parseval", parseval_rel, parseval_rel, 1e-6,
                                   parseval_rel <= 1e-6))

    # gradients of the individual operations
    def build_conv():
        x = ad.Parameter("x", rng.uniform(-1, 1, (2, 5)))
        w = ad.Parameter("w", rng.uniform(-1, 1, (3, 2, 3)))
        b = ad.Parameter("b", rng.uniform(-1, 1, 3))
        params = [x, w, b]

        def loss_fn():
            return ad.mean(ad.square(ad.conv1d(x, w, b))).item()

        def analytic_fn():
            for p in params:
                p.grad = None
            ad.backward(ad.mean(ad.square(ad.conv1d(x, w, b))))
            return [p.grad for p in params]

        return loss_fn, params, analytic_fn, None

    def build_leaky():
        magnitudes = rng.uniform(0.2, 1.0, (4, 5))
        x = ad.Parameter("x", magnitudes * rng.choice([-1.0, 1.0], (4, 5)))
        c = ad.Tensor(rng.uniform(-1, 1, (4, 5)))

        def loss_fn():
            return ad.total(ad.mul(ad.leaky_relu(x, 0.01), c)).item()

        def analytic_fn():
            x.grad = None
            ad.backward(ad.total(ad.mul(ad.leaky_relu(x, 0.01), c)))
            return [x.grad]

        return loss_fn, [x], analytic_fn, None

    def build_linear():
        x = ad.Parameter("x", rng.uniform(-1, 1, 4))
        w = ad.Parameter("w", rng.uniform(-1, 1, (3, 4)))
        b = ad.Parameter("b", rng.uniform(-1, 1, 3))
        params = [x, w, b]

        def loss_fn():
            return ad.mean(ad.square(ad.linear(x, w, b))).item()

        def analytic_fn():
            for p in params:
                p.grad = None
            ad.backward(ad.mean(ad.square(ad.linear(x, w, b))))
            return [p.grad for p in params]

        return loss_fn, params, analytic_fn, None

    def build_gru():
        hidden, width = 4, 3
        params = [
            ad.Parameter("x", rng.uniform(-1, 1, (2, width))),
            ad.Parameter("h", rng.uniform(-1, 1, (2, hidden))),
            ad.Parameter("w_ih", rng.uniform(-1, 1, (3 * hidden, width))),
            ad.Parameter("w_hh", rng.uniform(-1, 1, (3 * hidden, hidden))),
            ad.Parameter("b_ih", rng.uniform(-1, 1, 3 * hidden)),
            ad.Parameter("b_hh", rng.uniform(-1, 1, 3 * hidden)),
        ]

        def loss_fn():
            return ad.total(ad.square(ad.gru_cell(*params))).item()

        def analytic_fn():
            for p in params:
                p.grad = None
            ad.backward(ad.total(ad.square(ad.gru_cell(*params))))
            return [p.grad for p in params]

        return loss_fn, params, analytic_fn, None

    def build_pool():
        x = ad.Parameter("x", rng.uniform(-1, 1, (3, 7)))
        c = ad.Tensor(rng.uniform(-1, 1, 3))

        def loss_fn():
            return ad.total(ad.mul(ad.global_avg_pool(x), c)).item()

        def analytic_fn():
            x.grad = None
            ad.backward(ad.total(ad.mul(ad.global_avg_pool(x), c)))
            return [x.grad]

        return loss_fn, [x], analytic_fn, None

    for name, build in [("grad_conv1d", build_conv), ("grad_leaky_relu", build_leaky),
                        ("grad_linear", build_linear), ("grad_gru_cell", build_gru),
                        ("grad_global_avg_pool", build_pool)]:
        reports.append(_grad_check(name, build, corrupt))

    # gradients of the two converter losses on 4-frame toy pairs.  Central
    # differences at step 1e-3 are only meaningful away from the piecewise
    # kinks, so the toys are placed there: inputs offset from the generator
    # output range keeps the L1 residuals off zero, and the discriminator
    # output biases are shifted to hold every hinge active with a wide
    # margin.  Sigma estimates are frozen to match the gradient-stopped
    # scaling that backward() implements.
    dummy = np.random.default_rng(0)

    def make_loss_toy(seed, margin):
        cfg = ConverterConfig(channels=2, n_g=1, n_d=1, kernel=3, trim=1,
                              noise_sigma=0.0, margin=margin)
        toy = ConverterPair(cfg, np.random.default_rng(seed + 1), dtype=np.float64)
        randomize_parameters(toy.parameters(), np.random.default_rng(seed + 2))
        toy.d_x.freeze_spectral_norm()
        toy.d_y.freeze_spectral_norm()
        draw = np.random.default_rng(seed)
        bx = draw.uniform(1.5, 2.5, (1, 4, 128))
        by = draw.uniform(1.5, 2.5, (1, 4, 128))
        return toy, bx, by

    def fake_scores(toy, bx, by):
        tx = _to_net_layout(bx, np.float64)
        ty = _to_net_layout(by, np.float64)
        with ad.no_grad():
            fake_y = toy.g_xy.forward(tx)
            fake_x = toy.g_yx.forward(ty)
            toy.d_x.prepare(update=False)
            toy.d_y.prepare(update=False)
            real_x = float(toy.d_x.forward(_trim_time(tx, 1)).data[0])
            real_y = float(toy.d_y.forward(_trim_time(ty, 1)).data[0])
            score_x = float(toy.d_x.forward(_trim_time(fake_x, 1)).data[0])
            score_y = float(toy.d_y.forward(_trim_time(fake_y, 1)).data[0])
        return real_x, real_y, score_x, score_y

    def build_gen_loss():
        toy, bx, by = make_loss_toy(20240416, margin=0.5)
        _, _, score_x, score_y = fake_scores(toy, bx, by)
        # mean pooling passes an output-bias shift straight to the score
        toy.d_x.out_conv.bias.data[:] += -1.5 - score_x
        toy.d_y.out_conv.bias.data[:] += -1.5 - score_y
        params = toy.parameters()

        def loss_fn():
            loss, _ = generator_loss(toy, bx, by, dummy, update_sn=False)
            return loss.item()

        def analytic_fn():
            for p in params:
                p.grad = None
            loss, _ = generator_loss(toy, bx, by, dummy, update_sn=False)
            ad.backward(loss)
            return [p.grad if p.grad is not None else np.zeros_like(p.data)
                    for p in params]

        return loss_fn, params, analytic_fn, 25

    def build_disc_loss():
        toy, bx, by = make_loss_toy(20240466, margin=2.0)
        real_x, real_y, score_x, score_y = fake_scores(toy, bx, by)
        toy.d_x.out_conv.bias.data[:] -= (real_x + score_x) / 2
        toy.d_y.out_conv.bias.data[:] -= (real_y + score_y) / 2
        params = toy.discriminator_parameters()

        def loss_fn():
            loss, _ = discriminator_loss(toy, bx, by, dummy, update_sn=False)
            return loss.item()

        def analytic_fn():
            for p in params:
                p.grad = None
            loss, _ = discriminator_loss(toy, bx, by, dummy, update_sn=False)
            ad.backward(loss)
            return [p.grad if p.grad is not None else np.zeros_like(p.data)
                    for p in params]

        return loss_fn, params, analytic_fn, 25

    reports.append(_grad_check("grad_generator_loss", build_gen_loss, corrupt))
    reports.append(_grad_check("grad_discriminator_loss", build_disc_loss, corrupt))

    # vocoder NLL gradients through a short teacher-forced run (the kept
    # truncation error of the 1e-3 step stays far below tolerance there)
    voc = VocoderNet(VocoderConfig(hidden=4, head_hidden=4, up_hidden=(4, 4, 4)),
                     np.random.default_rng(11), dtype=np.float64)
    randomize_parameters(voc.parameters(), np.random.default_rng(43))
    windows = rng.uniform(0.0, 1.0, (1, 8, 128))
    prevs = rng.uniform(-0.5, 0.5, (1, 6))
    targets = rng.uniform(-0.5, 0.5, (1, 6))

    def build_voc_loss():
        params = voc.parameters()

        def loss_fn():
            return nll_graph(voc, windows, prevs, targets).item()

        def analytic_fn():
            for p in params:
                p.grad = None
            ad.backward(nll_graph(voc, windows, prevs, targets))
            return [p.grad if p.grad is not None else np.zeros_like(p.data)
                    for p in params]

        return loss_fn, params, analytic_fn, 20

    reports.append(_grad_check("grad_vocoder_nll", build_voc_loss, corrupt))

    # spectral normalization against the Jacobi oracle, on matrices whose
    # top singular pair is separated enough for 50 iterations to resolve
    worst_sigma = 0.0
    worst_unit = 0.0
    worst_truth = 0.0
    for _ in range(20):
        rows, cols = int(rng.integers(2, 65)), int(rng.integers(2, 321))
        w, sigma_true = random_gapped_matrix(rng, rows, cols)
        state = nn.PowerIterState(rng, rows, dtype=np.float64)
        sigma = nn.power_iterate(w, state, 50)
        want = singular_value_oracle(w)
        worst_sigma = max(worst_sigma, abs(sigma - want) / want)
        worst_truth = max(worst_truth, abs(want - sigma_true) / sigma_true)
        worst_unit = max(worst_unit, abs(singular_value_oracle(w / sigma) - 1.0))
    reports.append(ToleranceReport("spectral_norm_vs_oracle", worst_sigma, worst_sigma,
                                   1e-4, worst_sigma <= 1e-4))
    reports.append(ToleranceReport("spectral_norm_oracle_vs_truth", worst_truth,
                                   worst_truth, 1e-8, worst_truth <= 1e-8))
    reports.append(ToleranceReport("spectral_norm_unit_sigma", worst_unit, worst_unit,
                                   0.01, worst_unit <= 0.01))

    # Adam against the hand recurrence
    param = ad.Parameter("p", np.array([1.0]))
    opt = nn.Adam([param], alpha=0.1, beta1=0.5, beta2=0.9, epsilon=1e-8)
    theta, m, v = 1.0, 0.0, 0.0
    worst = 0.0
    for t in range(1, 4):
        param.grad = np.array([1.0])
        opt.step()
        m = 0.5 * m + 0.5 * 1.0
        v = 0.9 * v + 0.1 * 1.0
        theta -= 0.1 * (m / (1 - 0.5 ** t)) / (math.sqrt(v / (1 - 0.9 ** t)) + 1e-8)
        worst = max(worst, abs(float(param.data[0]) - theta))
    reports.append(ToleranceReport("adam_recurrence", worst, worst, 1e-10, worst <= 1e-10))

    # Gaussian head exact values and sampler moments
    err0 = abs(gaussian_nll(GaussianOut(0.3, 0.0), 0.3) - 0.9189385)
    err1 = abs(gaussian_nll(GaussianOut(0.3, 0.0), 1.3) - 1.4189385)
    worst = max(err0, err1)
    reports.append(ToleranceReport("gaussian_nll_exact", worst, worst, 1e-6, worst <= 1e-6))

    mean, variance, below = gaussian_moment_oracle(0.0, 0.0, 100000, seed=20240416)
    moments_ok = abs(mean) <= 0.013 and 0.98 <= variance <= 1.02
    reports.append(ToleranceReport("gaussian_sampler_moments", abs(mean),
                                   abs(variance - 1.0), 0.02, moments_ok))
    reports.append(ToleranceReport("gaussian_sampler_median", abs(below - 0.5),
                                   abs(below - 0.5), 0.01, abs(below - 0.5) <= 0.01))

    return reports
