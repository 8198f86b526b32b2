"""High-precision reference values frozen into the C++ unit tests.

Run with `python3 compute_oracles.py`; requires mpmath. Every value here is
computed without touching the C++ implementation.
"""
import mpmath as mp

mp.mp.dps = 40


def digamma_table():
    xs = ["1e-6", "1e-3", "0.1", "0.5", "1", "1.5", "2.75", "5.999", "7.3",
          "10", "12.5", "33.3", "100", "1234.5", "99999.9", "999999"]
    for s in xs:
        print(f"    {{{s}, {mp.nstr(mp.digamma(mp.mpf(s)), 25)}}},")


def gamma_pdf_log(x, shape, rate):
    return shape * mp.log(rate) - mp.loggamma(shape) + (shape - 1) * mp.log(x) - rate * x


def expect(shape, rate, f):
    """E[f(x)] for x ~ Gamma(shape, rate) by tanh-sinh quadrature."""
    return mp.quad(lambda t: mp.exp(gamma_pdf_log(t, shape, rate)) * f(t), [0, 1, 10, mp.inf])


def elbo_1x1():
    a, b, c = mp.mpf("1.5"), mp.mpf("0.8"), mp.mpf("1.2")
    gam, chi, nu, lam = mp.mpf("2.5"), mp.mpf("1.7"), mp.mpf("3.2"), mp.mpf("2.4")
    eta, sigma = mp.mpf("0.7"), mp.mpf("0.9")
    x, y = 3, mp.mpf("1.5")

    prior_theta = expect(gam, chi, lambda t: gamma_pdf_log(t, a, a * c))
    prior_beta = expect(nu, lam, lambda t: gamma_pdf_log(t, b, b))
    # K = 1 so q(z) is a point mass at x and contributes no entropy.
    pois = expect(gam, chi, lambda t: expect(
        nu, lam, lambda s: x * mp.log(t * s) - t * s - mp.loggamma(x + 1)))
    resp = expect(gam, chi, lambda t: -mp.log(2 * mp.pi * sigma) / 2 - (y - eta * t) ** 2 / (2 * sigma))
    ent_theta = -expect(gam, chi, lambda t: gamma_pdf_log(t, gam, chi))
    ent_beta = -expect(nu, lam, lambda t: gamma_pdf_log(t, nu, lam))
    total = prior_theta + prior_beta + pois + resp + ent_theta + ent_beta
    print("elbo_1x1_supervised =", mp.nstr(total, 20))
    print("elbo_1x1_unsupervised =", mp.nstr(total - resp, 20))


def learning_rate():
    print("rate(t0=64,kappa=0.7,t=100) =", mp.nstr(mp.exp(-mp.mpf("0.7") * mp.log(164)), 25))


if __name__ == "__main__":
    digamma_table()
    elbo_1x1()
    learning_rate()
