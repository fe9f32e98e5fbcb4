"""Plain-Python reference evaluations used as independent test oracles.

Nothing here imports the package; loops run over nested lists so the kernels
under test share no code path with their checks.
"""
import math


def lif_scalar(currents, tau, v_th, v_reset=0.0, v0=None):
    """Step one neuron through ``currents``; returns (spikes, membrane trace)."""
    v = v_reset if v0 is None else v0
    spikes, trace = [], []
    for x in currents:
        h = v + (1.0 / tau) * (x - (v - v_reset))
        s = 1 if h >= v_th else 0
        v = h * (1 - s) + v_reset * s
        spikes.append(s)
        trace.append(v)
    return spikes, trace


def dense_matmul(x, w, bias=None):
    """x: rows of length d_in; w: d_out rows of length d_in."""
    out = []
    for row in x:
        o = []
        for j, wr in enumerate(w):
            acc = 0.0
            for a, b in zip(row, wr):
                acc += a * b
            o.append(acc + (bias[j] if bias is not None else 0.0))
        out.append(o)
    return out


def naive_conv2d(img, kernel, stride=1, padding=0):
    """img[c][h][w], kernel[o][c][k][k] -> out[o][h'][w']."""
    c_in, h, w = len(img), len(img[0]), len(img[0][0])
    c_out, k = len(kernel), len(kernel[0][0])
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = [[[0.0] * wo for _ in range(ho)] for _ in range(c_out)]
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            y = i * stride + di - padding
                            x = j * stride + dj - padding
                            if 0 <= y < h and 0 <= x < w:
                                acc += img[c][y][x] * kernel[o][c][di][dj]
                out[o][i][j] = acc
    return out


def mssa_reference(branches, v, tau, v_th, v_reset=0.0):
    """branches: list of [T][B][N][D] spike maps; v: [T][B][N][D].

    Per-token channel sums of every branch are added, a LIF gate integrates
    them over time, and each token row of V is kept where the gate fires.
    Returns (alpha_sum[T][B][N], gate[T][B][N], out[T][B][N][D]).
    """
    T, B, N, D = len(v), len(v[0]), len(v[0][0]), len(v[0][0][0])
    alpha = [[[0] * N for _ in range(B)] for _ in range(T)]
    for br in branches:
        for t in range(T):
            for b in range(B):
                for n in range(N):
                    s = 0
                    for d in range(len(br[t][b][n])):
                        s += br[t][b][n][d]
                    alpha[t][b][n] += s
    gate = [[[0] * N for _ in range(B)] for _ in range(T)]
    for b in range(B):
        for n in range(N):
            spikes, _ = lif_scalar([alpha[t][b][n] for t in range(T)], tau, v_th, v_reset)
            for t in range(T):
                gate[t][b][n] = spikes[t]
    out = [[[[v[t][b][n][d] if gate[t][b][n] else 0 for d in range(D)] for n in range(N)]
            for b in range(B)] for t in range(T)]
    return alpha, gate, out


def ssa_reference(q, k, v, heads, scale, tau, v_th, v_reset=0.0):
    """Triple-loop Q K^T V * s per head followed by a LIF over time."""
    T, B, N, D = len(q), len(q[0]), len(q[0][0]), len(q[0][0][0])
    hd = D // heads
    current = [[[[0.0] * D for _ in range(N)] for _ in range(B)] for _ in range(T)]
    for t in range(T):
        for b in range(B):
            for h in range(heads):
                cols = range(h * hd, (h + 1) * hd)
                a = [[sum(q[t][b][i][c] * k[t][b][j][c] for c in cols) for j in range(N)]
                     for i in range(N)]
                for i in range(N):
                    for c in cols:
                        acc = 0
                        for j in range(N):
                            acc += a[i][j] * v[t][b][j][c]
                        current[t][b][i][c] = acc * scale
    out = [[[[0] * D for _ in range(N)] for _ in range(B)] for _ in range(T)]
    for b in range(B):
        for i in range(N):
            for c in range(D):
                s, _ = lif_scalar([current[t][b][i][c] for t in range(T)], tau, v_th, v_reset)
                for t in range(T):
                    out[t][b][i][c] = s[t]
    return current, out


def softmax_ce_grad(logits, label):
    """Gradient of cross-entropy w.r.t. logits for one sample."""
    m = max(logits)
    e = [math.exp(z - m) for z in logits]
    s = sum(e)
    return [ei / s - (1.0 if i == label else 0.0) for i, ei in enumerate(e)]
