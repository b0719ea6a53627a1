"""High-precision reference values for the QoS and rate formulas.

Evaluated with mpmath at 50 significant digits, independently of the Rust
implementation. The Rust tests freeze the printed values.

    python3 scripts/oracle_values.py
"""
from mpmath import mp, mpf, erfc, sqrt, log, exp, findroot, log10

mp.dps = 50


def q(x):
    return erfc(x / sqrt(2)) / 2


def inv_q(p):
    # bisection on the tail function
    lo, hi = mpf(-40), mpf(40)
    for _ in range(400):
        mid = (lo + hi) / 2
        if q(mid) > p:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def theta(a, d, eps):
    return log(1 + abs(log(eps / 2)) / (a * d))


def eb(a, d, eps):
    return abs(log(eps / 2)) / (d * theta(a, d, eps))


def show(name, v):
    print(f"{name} = {mp.nstr(v, 20)}")


show("inv_q(0.5)", inv_q(mpf("0.5")))
show("inv_q(0.05)", inv_q(mpf("0.05")))
show("inv_q(5e-6)", inv_q(mpf("5e-6")))
show("theta(0.2,8,1e-5)", theta(mpf("0.2"), 8, mpf("1e-5")))
show("eb(0.2,8,1e-5)", eb(mpf("0.2"), 8, mpf("1e-5")))
show("theta(1,10,0.2)", theta(1, 10, mpf("0.2")))
show("eb(1,10,0.2)", eb(1, 10, mpf("0.2")))

# finite-blocklength rate with tau*W = 50 channel uses, SNR = e^2 - 1, u = 160 bits
qi = inv_q(mpf("5e-6"))
s = mpf(50) / (160 * log(2)) * (2 - qi / sqrt(50))
show("rate(tauW=50, snr=e^2-1)", s)

# two-point effective capacity {0.5, 1.5}, theta = 2
show("ec_two_point", -log((exp(-1) + exp(-3)) / 2) / 2)

# path loss
for d in (1, 10, 250):
    show(f"-10lg(alpha) at d={d}", 35.3 + 37.6 * log10(mpf(d)))

# two-point water-filling g in {0.1, 1.9}, equiprobable, unit noise/(alpha) scaling:
# P(g) = (mu - 1/g)^+ with mean power 1.
def avg_power(mu):
    return sum((mu - 1 / g) if mu > 1 / g else 0 for g in (mpf("0.1"), mpf("1.9"))) / 2

lo, hi = mpf(0), mpf(100)
for _ in range(300):
    mid = (lo + hi) / 2
    if avg_power(mid) < 1:
        lo = mid
    else:
        hi = mid
mu = (lo + hi) / 2
show("wf_two_point_level", mu)
cap = sum(log(1 + g * max(mu - 1 / g, 0)) / log(2) for g in (mpf("0.1"), mpf("1.9"))) / 2
show("wf_two_point_capacity_bits", cap)
