"""Independent slow reference implementations used as test oracles."""
import math


def dist(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def directed_min(a, b):
    return [min(dist(p, q) for q in b) for p in a]


def chamfer(a, b):
    da, db = directed_min(a, b), directed_min(b, a)
    return sum(da) / len(da) + sum(db) / len(db)


def hausdorff(a, b):
    return max(max(directed_min(a, b)), max(directed_min(b, a)))


def assd(a, b):
    da, db = directed_min(a, b), directed_min(b, a)
    return (sum(da) + sum(db)) / (len(da) + len(db))


def laplacian(vertices, neighbours):
    total = 0.0
    for i, nb in enumerate(neighbours):
        if not nb:
            continue
        c = [sum(vertices[j][k] for j in nb) / len(nb) - vertices[i][k] for k in range(3)]
        total += math.sqrt(sum(x * x for x in c))
    return total / len(vertices)


def kl(mu, logvar, beta):
    return beta * -0.5 * sum(1 + lv - m * m - math.exp(lv) for m, lv in zip(mu, logvar))


def wasserstein(p, q):
    """Integral of |F_p - F_q| over the merged support."""
    xs = sorted(set(p) | set(q))
    total = 0.0
    for lo, hi in zip(xs, xs[1:]):
        fp = sum(x <= lo for x in p) / len(p)
        fq = sum(x <= lo for x in q) / len(q)
        total += abs(fp - fq) * (hi - lo)
    return total


def tetra_volume(vertices, faces):
    total = 0.0
    for a, b, c in faces:
        va, vb, vc = vertices[a], vertices[b], vertices[c]
        total += (va[0] * (vb[1] * vc[2] - vb[2] * vc[1])
                  - va[1] * (vb[0] * vc[2] - vb[2] * vc[0])
                  + va[2] * (vb[0] * vc[1] - vb[1] * vc[0]))
    return total / 6.0


def pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sx = math.sqrt(sum((a - mx) ** 2 for a in x))
    sy = math.sqrt(sum((b - my) ** 2 for b in y))
    return sxy / (sx * sy)
