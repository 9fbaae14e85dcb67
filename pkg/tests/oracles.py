"""Independent reference implementations used by several test modules."""
import numpy as np
import scipy.linalg

from pairshot.evaluate import kid


def brute_force_kid(x, y):
    """Direct double sums over index pairs; no matrix algebra."""
    f = len(x[0])

    def k(a, b):
        return (sum(ai * bi for ai, bi in zip(a, b)) / f + 1.0) ** 3

    n, m = len(x), len(y)
    xx = sum(k(x[i], x[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    yy = sum(k(y[i], y[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    xy = sum(k(x[i], y[j]) for i in range(n) for j in range(m)) / (n * m)
    return xx + yy - 2 * xy


def scipy_fid(m1, m2):
    covmean = scipy.linalg.sqrtm(m1.cov @ m2.cov)
    diff = m1.mean - m2.mean
    return float(diff @ diff + np.trace(m1.cov + m2.cov - 2 * np.real(covmean)))


def jackknife_brute(x, y):
    n, m = len(x), len(y)
    thetas_x = [kid(np.delete(x, i, 0), y) for i in range(n)]
    thetas_y = [kid(x, np.delete(y, j, 0)) for j in range(m)]
    var = (n - 1) / n * np.sum((np.array(thetas_x) - np.mean(thetas_x)) ** 2)
    var += (m - 1) / m * np.sum((np.array(thetas_y) - np.mean(thetas_y)) ** 2)
    return np.sqrt(var)
