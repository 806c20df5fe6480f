"""Reference computations that share no code with the package under test."""

import math

import mpmath


def sgm_rdp_quadrature(q, sigma, alpha, dps=30):
    """RDP of one sampled-Gaussian step at order ``alpha`` by direct integration.

    D_alpha(mu || mu0) with mu = (1-q) N(0, s^2) + q N(1, s^2), mu0 = N(0, s^2):
    (1 / (alpha-1)) * log E_{x ~ mu0}[(mu(x) / mu0(x))^alpha].
    """
    with mpmath.workdps(dps):
        q, s, a = mpmath.mpf(q), mpmath.mpf(sigma), mpmath.mpf(alpha)

        def integrand(x):
            ratio = (1 - q) + q * mpmath.exp((2 * x - 1) / (2 * s * s))
            return mpmath.npdf(x, 0, s) * ratio ** a

        # the integrand's mass sits near 0 and, for large alpha, near x = alpha
        pts = sorted({-mpmath.inf, -10 * s, mpmath.mpf(0), mpmath.mpf(1), a / 2, a, 2 * a + 10 * s, mpmath.inf})
        val = mpmath.quad(integrand, pts)
        return float(mpmath.log(val) / (a - 1))


def eps_from_rdp_points(orders, rdp_values, delta):
    return min(r + math.log(1 / delta) / (a - 1) for a, r in zip(orders, rdp_values))


def sgm_epsilon_oracle(q, sigma, steps, delta, orders):
    rdp = [steps * sgm_rdp_quadrature(q, sigma, a) for a in orders]
    return eps_from_rdp_points(orders, rdp, delta)


def chi_square_pvalue(counts, probs):
    from scipy.stats import chisquare

    n = sum(counts)
    expected = [p * n for p in probs]
    return chisquare(counts, expected).pvalue
