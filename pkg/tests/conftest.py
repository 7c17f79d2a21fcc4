import numpy as np
import pytest

from triplh.model import EmbeddingTable
from triplh.synthetic import planted_clusters

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def planted():
    dataset, user_labels, item_labels = planted_clusters()
    return dataset, user_labels, item_labels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_table(rng, n_users, n_items, dim, scale=0.5, a=None, b=None):
    return EmbeddingTable(
        rng.normal(0.0, scale, (n_users, dim)),
        rng.normal(0.0, scale, (n_items, dim)),
        float(rng.normal()) if a is None else a,
        float(rng.normal()) if b is None else b,
    )


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def mp_hyperbpr_loss(table, batch, digits=50):
    """Extended-precision BPR loss on clipped Poincare distances."""
    import mpmath

    from triplh.geometry import BALL_MAX_NORM

    with mpmath.workdps(digits):
        limit = mpmath.mpf(BALL_MAX_NORM)

        def clipped(row):
            v = [mpmath.mpf(float(t)) for t in row]
            norm = mpmath.sqrt(mpmath.fsum(t * t for t in v))
            return [t * limit / norm for t in v] if norm > limit else v

        def dist(x, y):
            sq = mpmath.fsum((a - b) ** 2 for a, b in zip(x, y))
            nx = mpmath.fsum(a * a for a in x)
            ny = mpmath.fsum(b * b for b in y)
            return mpmath.acosh(1 + 2 * sq / ((1 - nx) * (1 - ny)))

        total = mpmath.mpf(0)
        for u, p, n in zip(batch.users, batch.positives, batch.negatives):
            cu = clipped(table.users[u])
            z = dist(cu, clipped(table.items[n])) - dist(cu, clipped(table.items[p]))
            total += mpmath.log1p(mpmath.exp(-z))
        return total / len(batch)


def _stencil_precision():
    import mpmath

    return mpmath.workdps(50)


def finite_difference_errors(table, cfg, batch, step=1e-5, floor=1e-8):
    """Relative errors between analytic gradients and a five-point difference stencil.

    Components where both gradients are below ``floor`` are skipped. A
    component whose discrepancy is within the stencil's own round-off bound
    (about ``10 * eps * |loss| / step``) counts as exact, since no finite
    difference can resolve it further. Poincare models are differenced on an
    extended-precision reference loss: rows clipped to the ball edge make the
    float64 loss too ill-conditioned to difference.
    """
    from triplh.model import loss_and_grads

    loss, grads = loss_and_grads(table, cfg, batch)
    analytic = grads.dense(table)
    noise = 10 * np.finfo(float).eps * max(1.0, abs(loss)) / step
    if cfg.model_kind.geometry == "poincare":
        import mpmath

        def evaluate():
            return mp_hyperbpr_loss(table, batch)

        # a power of two keeps base +- k*step nearly exact in float64
        step, noise = mpmath.mpf(2.0**-30), 0.0
    else:
        def evaluate():
            return loss_and_grads(table, cfg, batch)[0]
    errors = []

    def probe(get, set_, exact):
        base = get()
        values = []
        for offset in (2, 1, -1, -2):
            set_(base + offset * float(step))
            values.append(evaluate())
        set_(base)
        with _stencil_precision():
            numeric = float((-values[0] + 8 * values[1] - 8 * values[2] + values[3]) / (12 * step))
        scale = max(abs(numeric), abs(exact))
        if scale > floor:
            diff = abs(numeric - exact)
            errors.append(0.0 if diff <= noise else diff / scale)

    for matrix, grad in ((table.users, analytic.users), (table.items, analytic.items)):
        for idx in np.ndindex(matrix.shape):
            probe(lambda: matrix[idx], lambda val: matrix.__setitem__(idx, val), grad[idx])
    probe(lambda: table.margin_a, lambda val: setattr(table, "margin_a", val), analytic.margin_a)
    probe(lambda: table.margin_b, lambda val: setattr(table, "margin_b", val), analytic.margin_b)
    return np.array(errors)


def random_instance(rng, kind, lam=None):
    from triplh.model import ModelConfig, TripletBatch

    n_users, n_items, dim = int(rng.integers(2, 9)), int(rng.integers(2, 9)), int(rng.integers(1, 7))
    lam = float(rng.uniform(0.0, 0.5)) if lam is None else lam
    cfg = ModelConfig(kind, dim=dim, lam=lam)
    scale = 0.3 if cfg.model_kind.geometry == "poincare" else 0.8
    table = random_table(rng, n_users, n_items, dim, scale=scale)
    size = int(rng.integers(1, 7))
    users = rng.integers(n_users, size=size)
    pos = rng.integers(n_items, size=size)
    neg = (pos + rng.integers(1, n_items, size=size)) % n_items
    return table, cfg, TripletBatch(users, pos, neg)


def brute_force_ranks(scores, dataset, target="test", k=10):
    """Per-user (rank, top-k) by sorting every unmasked candidate in plain Python."""
    targets = dataset.test_items if target == "test" else dataset.validation_items
    out = {}
    for u in range(dataset.n_users):
        t = int(targets[u])
        if t < 0:
            continue
        masked = set(dataset.train_items(u).tolist())
        if target == "test" and dataset.validation_items[u] >= 0:
            masked.add(int(dataset.validation_items[u]))
        candidates = [j for j in range(dataset.n_items) if j not in masked]
        ordered = sorted(candidates, key=lambda j: (-scores[u][j], j))
        rank = 1 + sum(1 for j in candidates if j != t and scores[u][j] >= scores[u][t])
        out[u] = (rank, ordered[:k])
    return out
