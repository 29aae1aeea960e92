"""Reference implementations that share no code with the package.

Each one is written the slow, obvious way (python loops, explicit rotation
matrices, materialised masks, mpmath) so a bug in the fast path cannot hide
in the oracle too.
"""

import math

import mpmath
import numpy as np


def matmul_loops(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.result_type(a, b))
    for i in range(m):
        for j in range(n):
            acc = a[i, 0] * b[0, j]
            for p in range(1, k):
                acc = acc + a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def softmax_mp(row, dps=50):
    with mpmath.workdps(dps):
        vals = [mpmath.mpf(float(x)) for x in row]
        top = max(vals)
        ex = [mpmath.exp(v - top) for v in vals]
        tot = mpmath.fsum(ex)
        return np.array([float(e / tot) for e in ex])


def rotation(pos, dim, base=10000.0):
    r = np.zeros((dim, dim))
    for i in range(dim // 2):
        ang = pos * base ** (-2.0 * i / dim)
        c, s = math.cos(ang), math.sin(ang)
        # row vector convention: out = x @ r
        r[2 * i, 2 * i] = c
        r[2 * i, 2 * i + 1] = s
        r[2 * i + 1, 2 * i] = -s
        r[2 * i + 1, 2 * i + 1] = c
    return r


def rope_rows(x, positions):
    """x: (m, H, D) or (m, D); each token row rotated by its own matrix."""
    out = np.empty_like(x, dtype=np.float64)
    for t, p in enumerate(positions):
        out[t] = np.dot(x[t], rotation(p, x.shape[-1]))
    return out


def unit_rows(x, eps=1e-12):
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape[:-1]):
        n = math.sqrt(sum(float(v) ** 2 for v in x[idx]))
        if n >= eps:
            out[idx] = x[idx] / n
    return out


def dense_attention(history, x_now, wq, wk, wv, wo, heads):
    """Block-causal attention over all frames with one materialised mask.

    ``history`` holds the clean frames 0..N-1, ``x_now`` frame N; returns the
    output rows of frame N.
    """
    frames = list(history) + [x_now]
    L, d = x_now.shape
    D = d // heads
    n = len(frames) * L
    X = np.vstack(frames)
    frame_of = np.repeat(np.arange(len(frames)), L)
    Q = np.dot(X, wq).reshape(n, heads, D)
    K = np.dot(X, wk).reshape(n, heads, D)
    V = np.dot(X, wv).reshape(n, heads, D)
    Q = rope_rows(Q, range(n))
    K = rope_rows(K, range(n))
    mask = np.where(frame_of[None, :] <= frame_of[:, None], 0.0, -np.inf)
    out = np.zeros((n, heads, D))
    for h in range(heads):
        scores = np.dot(Q[:, h], K[:, h].T) / math.sqrt(D) + mask
        scores -= scores.max(axis=1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=1, keepdims=True)
        out[:, h] = np.dot(w, V[:, h])
    return np.dot(out.reshape(n, d)[-L:], wo)


def delta_rule_loops(S, k, v, alpha, beta):
    """S (H, D, D); k, v (L, H, D); gates (L, H).  Token by token, head by head."""
    S = np.array(S, dtype=np.float64, copy=True)
    L, H, D = k.shape
    for j in range(L):
        for h in range(H):
            kj = k[j, h].reshape(1, D)
            vj = v[j, h].reshape(1, D)
            err = vj - np.dot(kj, S[h])
            S[h] = alpha[j, h] * S[h] + beta[j, h] * np.dot(kj.T, err)
    return S


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def hybrid_layer_output(x, frame_index, S, wq, wk, wv, wo, heads, phi_q, w_g, b_g, granularity):
    L, d = x.shape
    D = d // heads
    Q = np.dot(x, wq).reshape(L, heads, D)
    K = np.dot(x, wk).reshape(L, heads, D)
    V = np.dot(x, wv).reshape(L, heads, D)
    Qr, Kr = rope_rows(Q, range(L)), rope_rows(K, range(L))
    intra = np.zeros((L, heads, D))
    for h in range(heads):
        sc = np.dot(Qr[:, h], Kr[:, h].T) / math.sqrt(D)
        w = np.exp(sc - sc.max(axis=1, keepdims=True))
        intra[:, h] = np.dot(w / w.sum(axis=1, keepdims=True), V[:, h])
    qf = np.stack([np.dot(Q[:, h], phi_q[h]) for h in range(heads)], axis=1)
    qlin = unit_rows(rope_rows(qf, [frame_index * L + j for j in range(L)]))
    inter = np.stack([np.dot(qlin[:, h], S[h]) for h in range(heads)], axis=1)
    g = sigmoid(np.dot(x, w_g) + b_g)
    if granularity == "scalar":
        g = g.reshape(L, 1, 1)
    elif granularity == "headwise":
        g = g.reshape(L, heads, 1)
    else:
        g = g.reshape(L, heads, D)
    return np.dot((intra + g * inter).reshape(L, d), wo)


def absorb(S, clean, frame_index, wk, wv, heads, phi_k, phi_v, w_a, b_a, w_b, b_b):
    L, d = clean.shape
    D = d // heads
    K = np.dot(clean, wk).reshape(L, heads, D)
    V = np.dot(clean, wv).reshape(L, heads, D)
    kf = np.stack([np.dot(K[:, h], phi_k[h]) for h in range(heads)], axis=1)
    vf = np.stack([np.dot(V[:, h], phi_v[h]) for h in range(heads)], axis=1)
    klin = unit_rows(rope_rows(kf, [frame_index * L + j for j in range(L)]))
    a = sigmoid(np.dot(clean, w_a) + b_a)
    b = sigmoid(np.dot(clean, w_b) + b_b)
    return delta_rule_loops(S, klin, vf, a, b)


def alignment_loss(layer, context, x_t):
    """Student state from the context, student vs teacher on x_t, / (L d)."""
    p = layer.proj
    H, D = p.num_heads, p.head_dim
    S = np.zeros((H, D, D))
    for f, frame in enumerate(context):
        S = absorb(S, frame, f, p.w_k, p.w_v, H, layer.fmaps.phi_k, layer.fmaps.phi_v,
                   layer.gp.w_alpha, layer.gp.b_alpha, layer.gp.w_beta, layer.gp.b_beta)
    n = len(context)
    y_s = hybrid_layer_output(x_t, n, S, p.w_q, p.w_k, p.w_v, p.w_o, H, layer.fmaps.phi_q,
                              layer.gates.w_g, layer.gates.b_g, layer.gates.granularity)
    y_t = dense_attention(context, x_t, p.w_q, p.w_k, p.w_v, p.w_o, H)
    return float(np.sum((y_s - y_t) ** 2) / x_t.size)


def select_by_full_sort(p, ids, budget):
    order = np.lexsort((np.asarray(ids), np.asarray(p)))
    return sorted(int(ids[i]) for i in order[:budget])


def protection_by_loops(baseline, replace, skip, beta, threshold, eps=1e-9):
    """Recovery rates, HR/HS split and protection score with plain loops."""
    n_layers, n_dims = len(replace), len(baseline)
    hr, hs = [], []
    for i in range(n_dims):
        rates = []
        for l in range(n_layers):
            den = baseline[i] - skip[l][i]
            if abs(den) >= eps:
                rates.append((replace[l][i] - skip[l][i]) / den)
        if not rates:
            continue
        (hr if sum(rates) / len(rates) >= threshold - 1e-12 else hs).append(i)
    p = []
    for l in range(n_layers):
        d_hs = sum(baseline[i] - replace[l][i] for i in hs) / len(hs) if hs else 0.0
        d_hr = sum(baseline[i] - replace[l][i] for i in hr) / len(hr) if hr else 0.0
        p.append(d_hs + beta * max(d_hr, 0.0))
    return p, hr, hs
