# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled separable solver kernels; see ``_pykernels`` for the algorithms."""

from libc.math cimport exp, expm1, log, fabs, fmin, fmax, INFINITY, isfinite
from libc.stdlib cimport malloc, free

cdef double EXP_CAP = 700.0
cdef int NEWTON_MAXIT = 200
cdef int ROOT_MAXIT = 300


cdef inline double _expk(double k, double x) noexcept nogil:
    cdef double t = k * x
    if t > EXP_CAP:
        t = EXP_CAP
    return exp(t)


cdef double _scalar(double v, double eta, double c, double k, double l, double u) noexcept nogil:
    """Minimiser of eta/2 (x-v)^2 + c (exp(kx)-1) + l x on [0, u]; NaN if unbounded."""
    cdef double x, du, ex, dx, dd, step
    cdef int it
    if u <= 0:
        return 0.0
    if -eta * v + c * k + l >= 0:
        return 0.0
    x = u
    if eta > 0:
        x = fmin(x, v - l / eta)
    if c > 0:
        x = fmin(x, log((eta * v - l) / (c * k)) / k)
    if not isfinite(x):
        return 0.0 / 0.0
    du = eta * (x - v) + c * k * _expk(k, x) + l
    if du <= 0:
        return x
    for it in range(NEWTON_MAXIT):
        ex = _expk(k, x)
        dx = eta * (x - v) + c * k * ex + l
        if dx <= 0:
            break
        dd = eta + c * k * k * ex
        step = dx / dd
        x = x - step
        if x < 0:
            x = 0.0
        if step <= 1e-16 * fabs(x) + 1e-300:
            break
    return x


cdef inline double _pair_sum(const double* v, double eta, const double* c, const double* k,
                             const double* l, const double* u, double shift, double* x) noexcept nogil:
    x[0] = _scalar(v[0], eta, c[0], k[0], l[0] + shift, u[0])
    x[1] = _scalar(v[1], eta, c[1], k[1], l[1] + shift, u[1])
    return x[0] + x[1]


cdef double _solve_pair(const double* v, double eta, const double* c, const double* k,
                        const double* l, const double* u, double cap, double shift, double* x) noexcept nogil:
    """Solve one device's two coordinates under x0 + x1 <= cap; returns the pair sum."""
    cdef double g, ftol, a, fa, b, fb, t, ft, pi
    cdef int side = 0, it
    g = _pair_sum(v, eta, c, k, l, u, shift, x) - cap
    ftol = 1e-13 * fmax(cap, 1.0)
    if g <= ftol:
        return g + cap
    a = 0.0
    fa = g
    b = fmax(fmax(eta * v[0] - c[0] * k[0] - l[0] - shift, eta * v[1] - c[1] * k[1] - l[1] - shift), 0.0)
    fb = -cap
    if fabs(fb) <= ftol:
        a = b
        fa = fb
    for it in range(ROOT_MAXIT):
        if not (fa > ftol and fb < -ftol):
            break
        t = (a * fb - b * fa) / (fb - fa)
        if not (t > a and t < b):
            t = 0.5 * (a + b)
        ft = _pair_sum(v, eta, c, k, l, u, shift + t, x) - cap
        if fabs(ft) <= ftol:
            a = t
            b = t
            fa = ft
            fb = ft
            break
        if ft > 0:
            if side == 1:
                fb *= 0.5
            a = t
            fa = ft
            side = 1
        else:
            if side == -1:
                fa *= 0.5
            b = t
            fb = ft
            side = -1
        if b - a <= 1e-15 * fmax(fabs(a), fabs(b)):
            break
    if fa <= ftol:
        pi = a if fabs(fa) <= fabs(fb) else b
    else:
        pi = b
    return _pair_sum(v, eta, c, k, l, u, shift + pi, x)


cdef double _total(int npair, const double* v, double eta, const double* c, const double* k,
                   const double* l, const double* u, const double* cap, double shift, double* x) noexcept nogil:
    cdef double s = 0.0
    cdef int p
    for p in range(npair):
        s += _solve_pair(v + 2 * p, eta, c + 2 * p, k + 2 * p, l + 2 * p, u + 2 * p, cap[p], shift, x + 2 * p)
    return s


cdef double _root_total(int npair, const double* v, double eta, const double* c, const double* k,
                        const double* l, const double* u, const double* cap, double target,
                        double a, double fa, double b, double fb, double ftol, bint want_low,
                        double* x) noexcept nogil:
    """Illinois search on the total-constraint multiplier; returns it."""
    cdef double t, ft
    cdef int side = 0, it
    if fabs(fa) <= ftol:
        return a
    if fabs(fb) <= ftol:
        return b
    for it in range(ROOT_MAXIT):
        t = (a * fb - b * fa) / (fb - fa)
        if not (t > a and t < b):
            t = 0.5 * (a + b)
        ft = _total(npair, v, eta, c, k, l, u, cap, t, x) - target
        if fabs(ft) <= ftol:
            return t
        if ft > 0:
            if side == 1:
                fb *= 0.5
            a = t
            fa = ft
            side = 1
        else:
            if side == -1:
                fa *= 0.5
            b = t
            fb = ft
            side = -1
        if b - a <= 1e-15 * fmax(fabs(a), fabs(b)):
            break
    return a if want_low else b


def solve_block(const double[::1] v, double eta, const double[::1] c, const double[::1] k,
                const double[::1] l, const double[::1] u, const double[::1] cap,
                double lo, double hi, double[::1] out):
    """Compiled counterpart of :func:`feiopt._pykernels.solve_block`."""
    cdef int n = v.shape[0]
    cdef int npair = n // 2
    cdef int j, p, it
    cdef double s0, xi = 0.0, ftol, xmax, step, a, fa, b, fb, d
    if n % 2 or c.shape[0] != n or k.shape[0] != n or l.shape[0] != n or u.shape[0] != n \
            or cap.shape[0] != npair or out.shape[0] != n:
        raise ValueError("solve_block: inconsistent array lengths")
    with nogil:
        s0 = _total(npair, &v[0], eta, &c[0], &k[0], &l[0], &u[0], &cap[0], 0.0, &out[0])
        if s0 > hi + 1e-12 * fmax(1.0, hi):
            ftol = 1e-12 * fmax(1.0, hi)
            xmax = 0.0
            for j in range(n):
                xmax = fmax(xmax, eta * v[j] - c[j] * k[j] - l[j])
            xi = _root_total(npair, &v[0], eta, &c[0], &k[0], &l[0], &u[0], &cap[0], hi,
                             0.0, s0 - hi, xmax, -hi, ftol, False, &out[0])
            _total(npair, &v[0], eta, &c[0], &k[0], &l[0], &u[0], &cap[0], xi, &out[0])
        elif s0 < lo - 1e-12 * fmax(1.0, lo):
            ftol = 1e-12 * fmax(1.0, lo)
            step = 1e-12
            for j in range(n):
                d = fabs(eta * v[j] - c[j] * k[j] - l[j])
                step = fmax(step, d)
            b = 0.0
            fb = s0 - lo
            a = -step
            fa = _total(npair, &v[0], eta, &c[0], &k[0], &l[0], &u[0], &cap[0], a, &out[0]) - lo
            for it in range(4000):
                if fa >= -ftol:
                    break
                b = a
                fb = fa
                a *= 2.0
                fa = _total(npair, &v[0], eta, &c[0], &k[0], &l[0], &u[0], &cap[0], a, &out[0]) - lo
            xi = _root_total(npair, &v[0], eta, &c[0], &k[0], &l[0], &u[0], &cap[0], lo,
                             a, fa, b, fb, ftol, True, &out[0])
            _total(npair, &v[0], eta, &c[0], &k[0], &l[0], &u[0], &cap[0], xi, &out[0])
    for j in range(n):
        if not isfinite(out[j]):
            raise ValueError("unbounded scalar subproblem: linear objective with infinite box")
    return xi


cdef double _ball_excess(int n, const double* z, const double* a, const double* k, double lam,
                         double budget, double* w) noexcept nogil:
    cdef double e = 0.0
    cdef int j
    for j in range(n):
        w[j] = _scalar(z[j], 1.0, lam * a[j], k[j], 0.0, INFINITY)
        e += a[j] * expm1(k[j] * w[j])
    return e - budget


def project_ball(const double[::1] z, const double[::1] a, const double[::1] k, double budget,
                 double[::1] out):
    """Compiled counterpart of :func:`feiopt._pykernels.project_ball`."""
    cdef int n = z.shape[0]
    cdef int j, it, side = 0
    cdef double e0 = 0.0, lam, flam, lo_, flo, t, ft, ftol, lam_hi = 0.0, lam_star
    cdef bint found = False
    if a.shape[0] != n or k.shape[0] != n or out.shape[0] != n:
        raise ValueError("project_ball: inconsistent array lengths")
    with nogil:
        for j in range(n):
            out[j] = fmax(z[j], 0.0)
            e0 += a[j] * expm1(fmin(k[j] * out[j], EXP_CAP))
        if e0 <= budget:
            lam_star = 0.0
        else:
            for j in range(n):
                lam_hi = fmax(lam_hi, fmax(z[j], 0.0) / (a[j] * k[j]))
            ftol = 1e-10 * budget
            lam = lam_hi
            flam = -budget
            lo_ = 0.0
            flo = e0 - budget
            for it in range(4000):
                t = 0.5 * lam
                ft = _ball_excess(n, &z[0], &a[0], &k[0], t, budget, &out[0])
                if ft > 0:
                    lo_ = t
                    flo = ft
                    found = True
                    break
                lam = t
                flam = ft
            # Illinois on [lo_, lam]
            lam_star = lam
            if fabs(flo) <= ftol:
                lam_star = lo_
            elif fabs(flam) <= ftol:
                lam_star = lam
            else:
                for it in range(ROOT_MAXIT):
                    t = (lo_ * flam - lam * flo) / (flam - flo)
                    if not (t > lo_ and t < lam):
                        t = 0.5 * (lo_ + lam)
                    ft = _ball_excess(n, &z[0], &a[0], &k[0], t, budget, &out[0])
                    if fabs(ft) <= ftol:
                        lo_ = t
                        lam = t
                        flo = ft
                        flam = ft
                        break
                    if ft > 0:
                        if side == 1:
                            flam *= 0.5
                        lo_ = t
                        flo = ft
                        side = 1
                    else:
                        if side == -1:
                            flo *= 0.5
                        lam = t
                        flam = ft
                        side = -1
                    if lam - lo_ <= 1e-15 * fmax(fabs(lo_), fabs(lam)):
                        break
                lam_star = lam
            _ball_excess(n, &z[0], &a[0], &k[0], lam_star, budget, &out[0])
    return lam_star


def minimize_scalar_into(const double[::1] v, double eta, const double[::1] c, const double[::1] k,
                         const double[::1] l, const double[::1] u, double[::1] out):
    cdef int n = v.shape[0]
    cdef int j
    for j in range(n):
        out[j] = _scalar(v[j], eta, c[j], k[j], l[j], u[j])
