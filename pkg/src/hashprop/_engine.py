"""Compiled per-shard training and inference loops.

One call of :func:`train_shard` runs a worker's whole shard without the GIL:
select active sets, sparse forward, softmax loss, sparse backward, apply the
accumulated gradient at batch boundaries and rehash the neurons it moved.
Several calls may run concurrently from Python threads against the same
parameters, optimizer state and indices; nothing but the per-table index
mutexes is locked.

Array arguments passed as numba typed lists, one entry per layer:
  Ws, Bs, VW, GW, TW, VB, GB, TB   parameters and optimizer state
  ixs                              index tuples of the hidden layers
"""
import numpy as np
from numba import njit

from .lsh_index import _collect, _rehash_rows
from .network import _affine_rows, _backprop_delta, _softmax_xent
from .optimizer import _update

S_STD, S_VD, S_AD, S_WTA, S_LSH = 0, 1, 2, 3, 4

# slots of the per-worker stats vector
ST_LOSS, ST_EXAMPLES, ST_MULTS, ST_OUT_MULTS, ST_HASH_MULTS = 0, 1, 2, 3, 4
ST_FALLBACKS, ST_VISITED, ST_DIVERGED, ST_AD_GUARDS, ST_MOVES = 5, 6, 7, 8, 9
ST_UPDATES, ST_DENSE_MULTS, ST_RECORDED = 10, 11, 12
N_STATS = 16

DIVERGED_LOSS, DIVERGED_PARAM, DIVERGED_ACT = 1.0, 2.0, 3.0


@njit(cache=True, nogil=True)
def _make_qs(n, K, L):
    npairs = max(1, K * (K - 1) // 2)
    return (np.zeros(n, np.int32), np.zeros(n, np.int32), np.zeros(n, np.int32),
            np.zeros(n, np.float64), np.zeros(K * L, np.float64), np.zeros(L, np.int64),
            np.zeros((L, K), np.int64), np.zeros((L, npairs), np.int64),
            np.zeros(n, np.int32))


@njit(cache=True, nogil=True)
def _select(l, code, W, b, ix, qs, in_ids, in_vals, nin, dense_in, keep, alpha, beta,
            cap, probes, ids, z, zf, qi, qv, stats):
    """Pick layer ``l``'s active set into ``ids`` and its pre-activations into
    ``z``; returns the active count.  ``dense_in`` is the fan-in charged for
    each computed unit."""
    n = W.shape[0]
    if code == S_STD:
        for i in range(n):
            ids[i] = i
        _affine_rows(W, b, ids, n, in_ids, in_vals, nin, z)
        stats[ST_MULTS] += n * dense_in
        return n
    if code == S_VD:
        m = 0
        for i in range(n):
            if np.random.random() < keep:
                ids[m] = i
                m += 1
        _affine_rows(W, b, ids, m, in_ids, in_vals, nin, z)
        stats[ST_MULTS] += m * dense_in
        return m
    if code == S_LSH:
        nq = nin + 1
        for s in range(nin):
            qi[s] = in_ids[s]
            qv[s] = in_vals[s]
        qi[nin] = W.shape[1]
        qv[nin] = 1.0
        count, fallback, visited = _collect(ix, qi, qv, nq, probes, cap, qs)
        out = qs[8]
        for u in range(count):
            ids[u] = out[u]
        stats[ST_FALLBACKS] += fallback
        stats[ST_VISITED] += visited
        stats[ST_HASH_MULTS] += ix[1].shape[1] * nq
        _affine_rows(W, b, ids, count, in_ids, in_vals, nin, z)
        stats[ST_MULTS] += count * dense_in
        return count

    # adaptive dropout and WTA need every pre-activation first
    for i in range(n):
        ids[i] = i
    _affine_rows(W, b, ids, n, in_ids, in_vals, nin, zf)
    stats[ST_MULTS] += n * dense_in
    m = 0
    if code == S_AD:
        best = 0
        for i in range(n):
            if zf[i] > zf[best]:
                best = i
            p = 1.0 / (1.0 + np.exp(-(alpha * zf[i] + beta)))
            if np.random.random() < p:
                ids[m] = i
                m += 1
        if m == 0:
            ids[0] = best
            m = 1
            stats[ST_AD_GUARDS] += 1
    else:
        for i in range(n):
            z[i] = -zf[i] if zf[i] > 0.0 else 0.0
        order = np.argsort(z, kind="mergesort")
        for u in range(cap):
            i = order[u]
            if zf[i] <= 0.0:
                break
            ids[m] = i
            m += 1
        ids[:m].sort()
    for u in range(m):
        z[u] = zf[ids[u]]
    return m


@njit(cache=True, nogil=True)
def train_shard(X, Y, order, Ws, Bs, VW, GW, TW, VB, GB, TB, clock,
                okind, eta, gamma, eps,
                scode, skeep, salpha, sbeta, scap, sprobes, maintain, ixs,
                batch, rehash_every, seed, rec, rec_n, rec_stride, act_sum,
                last_ids, last_n, stats):
    H = len(ixs)
    nl = H + 1
    np.random.seed(seed)

    # flat views for the optimizer, per-layer scratch
    Wf = [Ws[l].reshape(-1) for l in range(nl)]
    VWf = [VW[l].reshape(-1) for l in range(nl)]
    GWf = [GW[l].reshape(-1) for l in range(nl)]
    TWf = [TW[l].reshape(-1) for l in range(nl)]
    sids = [np.zeros(Ws[l].shape[1], np.int64) for l in range(nl)]
    svals = [np.zeros(Ws[l].shape[1]) for l in range(nl)]
    dd = [np.zeros(Ws[l].shape[1]) for l in range(nl)]
    nin = np.zeros(nl, np.int64)
    gW = [np.zeros(Ws[l].shape) for l in range(nl)]
    gb = [np.zeros(Ws[l].shape[0]) for l in range(nl)]
    rflag = [np.zeros(Ws[l].shape[0], np.uint8) for l in range(nl)]
    rlist = [np.zeros(Ws[l].shape[0], np.int64) for l in range(nl)]
    nr = np.zeros(nl, np.int64)
    cflag = [np.zeros(Ws[l].shape[1], np.uint8) for l in range(nl)]
    clist = [np.zeros(Ws[l].shape[1], np.int64) for l in range(nl)]
    nc = np.zeros(nl, np.int64)
    ids = [np.zeros(Ws[l].shape[0], np.int64) for l in range(H)]
    z = [np.zeros(Ws[l].shape[0]) for l in range(H)]
    zf = [np.zeros(Ws[l].shape[0]) for l in range(H)]
    qi = [np.zeros(Ws[l].shape[1] + 1, np.int64) for l in range(H)]
    qv = [np.zeros(Ws[l].shape[1] + 1) for l in range(H)]
    qss = [_make_qs(Ws[l].shape[0], ixs[l][15][0], ixs[l][15][1]) for l in range(H)]
    dflag = [np.zeros(Ws[l].shape[0], np.uint8) for l in range(H)]
    dlist = [np.zeros(Ws[l].shape[0], np.int64) for l in range(H)]
    ndirty = np.zeros(H, np.int64)
    row_base = np.zeros(H, np.int64)
    for l in range(1, H):
        row_base[l] = row_base[l - 1] + Ws[l - 1].shape[0]
    scale = np.ones(H)
    for l in range(H):
        if scode[l] == S_VD:
            scale[l] = 1.0 / skeep[l]

    C = Ws[H].shape[0]
    all_out = np.arange(C)
    logits = np.zeros(C)
    dlog = np.zeros(C)
    d0 = X.shape[1]
    pending = 0
    updates = 0

    for e in range(order.shape[0] + 1):
        flush = e == order.shape[0]
        if not flush:
            ex = order[e]
            # input support: nonzero pixels, charged as a dense fan-in
            m = 0
            for c in range(d0):
                v = np.float64(X[ex, c])
                if v != 0.0:
                    sids[0][m] = c
                    svals[0][m] = v
                    m += 1
            nin[0] = m

            for l in range(H):
                W = Ws[l]
                n = W.shape[0]
                dense_in = d0 if l == 0 else nin[l]
                stats[ST_DENSE_MULTS] += n * W.shape[1]
                cnt = _select(l, scode[l], W, Bs[l], ixs[l], qss[l], sids[l], svals[l],
                              nin[l], dense_in, skeep[l], salpha[l], sbeta[l], scap[l],
                              sprobes[l], ids[l], z[l], zf[l], qi[l], qv[l], stats)
                act_sum[l] += cnt
                for u in range(cnt):
                    last_ids[l][u] = ids[l][u]
                last_n[l] = cnt
                m = 0
                for u in range(cnt):
                    if not np.isfinite(z[l][u]):
                        stats[ST_DIVERGED] = DIVERGED_ACT
                        return
                    if z[l][u] > 0.0:
                        sids[l + 1][m] = ids[l][u]
                        svals[l + 1][m] = z[l][u] * scale[l]
                        m += 1
                nin[l + 1] = m

            _affine_rows(Ws[H], Bs[H], all_out, C, sids[H], svals[H], nin[H], logits)
            stats[ST_OUT_MULTS] += C * nin[H]
            loss = _softmax_xent(logits, Y[ex], dlog)
            if not np.isfinite(loss):
                stats[ST_DIVERGED] = DIVERGED_LOSS
                return
            stats[ST_LOSS] += loss
            stats[ST_EXAMPLES] += 1

            # backward: output layer, then hidden layers in reverse
            for l in range(H, -1, -1):
                if l == H:
                    rows = all_out
                    nrows = C
                    dl = dlog
                else:
                    rows = sids[l + 1]
                    nrows = nin[l + 1]
                    dl = dd[l + 1]
                    for u in range(nrows):
                        dl[u] *= scale[l]
                g2 = gW[l]
                g1 = gb[l]
                for u in range(nrows):
                    r = rows[u]
                    d = dl[u]
                    if d == 0.0:
                        continue
                    if rflag[l][r] == 0:
                        rflag[l][r] = 1
                        rlist[l][nr[l]] = r
                        nr[l] += 1
                    for s in range(nin[l]):
                        g2[r, sids[l][s]] += d * svals[l][s]
                    g1[r] += d
                for s in range(nin[l]):
                    c = sids[l][s]
                    if cflag[l][c] == 0:
                        cflag[l][c] = 1
                        clist[l][nc[l]] = c
                        nc[l] += 1
                if l > 0:
                    _backprop_delta(Ws[l], rows, dl, nrows, sids[l], nin[l], dd[l])
            pending += 1

        if pending == 0 or (pending < batch and not flush):
            continue

        # apply the accumulated gradient
        t = clock[0] + 1
        clock[0] = t
        inv = 1.0 / pending
        pending = 0
        record = rec_stride > 0 and updates % rec_stride == 0 and \
            updates // rec_stride < rec.shape[0]
        slot = updates // rec_stride if record else 0
        nrec = 0
        for l in range(H, -1, -1):
            nin_l = Ws[l].shape[1]
            track = l < H and maintain[l] != 0
            Wl, Vl, Gl, Tl = Wf[l], VWf[l], GWf[l], TWf[l]
            Bl, VBl, GBl, TBl = Bs[l], VB[l], GB[l], TB[l]
            g2 = gW[l]
            g1 = gb[l]
            src = ixs[l] if l < H else ixs[0]
            pt, cache, sqn = src[0], src[1], src[2]
            LK = cache.shape[1]
            for u in range(nr[l]):
                r = rlist[l][u]
                rflag[l][r] = 0
                moved = False
                for v in range(nc[l]):
                    c = clist[l][v]
                    g = g2[r, c]
                    if g == 0.0:
                        continue
                    g2[r, c] = 0.0
                    k = r * nin_l + c
                    old = np.float64(Wl[k])
                    _update(okind, Wl, Vl, Gl, Tl, k, g * inv, t, eta, gamma, eps)
                    new = np.float64(Wl[k])
                    if not np.isfinite(new):
                        stats[ST_DIVERGED] = DIVERGED_PARAM
                    if track and new != old:
                        dv = new - old
                        for tt in range(LK):
                            cache[r, tt] += pt[c, tt] * dv
                        sqn[r] += new * new - old * old
                        moved = True
                g = g1[r]
                if g != 0.0:
                    g1[r] = 0.0
                    old = np.float64(Bl[r])
                    _update(okind, Bl, VBl, GBl, TBl, r, g * inv, t, eta, gamma, eps)
                    new = np.float64(Bl[r])
                    if not np.isfinite(new):
                        stats[ST_DIVERGED] = DIVERGED_PARAM
                    if track and new != old:
                        dv = new - old
                        for tt in range(LK):
                            cache[r, tt] += pt[nin_l, tt] * dv
                        sqn[r] += new * new - old * old
                        moved = True
                if moved and dflag[l][r] == 0:
                    dflag[l][r] = 1
                    dlist[l][ndirty[l]] = r
                    ndirty[l] += 1
                if record and l < H and nrec < rec.shape[1]:
                    rec[slot, nrec] = row_base[l] + r
                    nrec += 1
            nr[l] = 0
            for v in range(nc[l]):
                cflag[l][clist[l][v]] = 0
            nc[l] = 0
        if record:
            rec_n[slot] = nrec
            stats[ST_RECORDED] += 1
        updates += 1
        stats[ST_UPDATES] += 1
        if stats[ST_DIVERGED] != 0.0:
            return

        if updates % rehash_every == 0 or flush:
            for l in range(H):
                if ndirty[l] == 0:
                    continue
                fparams = ixs[l][14]
                sqn = ixs[l][2]
                for u in range(ndirty[l]):
                    r = dlist[l][u]
                    dflag[l][r] = 0
                    nrm = np.sqrt(sqn[r])
                    if nrm > fparams[1]:
                        fparams[1] = nrm
                stats[ST_MOVES] += _rehash_rows(ixs[l], dlist[l], ndirty[l])
                ndirty[l] = 0


@njit(cache=True, nogil=True)
def predict_lsh(X, Ws, Bs, ixs, sprobes, scap, seed, pred, stats):
    """Top-1 predictions using LSH active sets in every hidden layer."""
    H = len(ixs)
    np.random.seed(seed)
    sids = [np.zeros(Ws[l].shape[1], np.int64) for l in range(H + 1)]
    svals = [np.zeros(Ws[l].shape[1]) for l in range(H + 1)]
    ids = [np.zeros(Ws[l].shape[0], np.int64) for l in range(H)]
    z = [np.zeros(Ws[l].shape[0]) for l in range(H)]
    qi = [np.zeros(Ws[l].shape[1] + 1, np.int64) for l in range(H)]
    qv = [np.zeros(Ws[l].shape[1] + 1) for l in range(H)]
    qss = [_make_qs(Ws[l].shape[0], ixs[l][15][0], ixs[l][15][1]) for l in range(H)]
    C = Ws[H].shape[0]
    all_out = np.arange(C)
    logits = np.zeros(C)
    d0 = X.shape[1]
    for ex in range(X.shape[0]):
        m = 0
        for c in range(d0):
            v = np.float64(X[ex, c])
            if v != 0.0:
                sids[0][m] = c
                svals[0][m] = v
                m += 1
        nin = m
        for l in range(H):
            W = Ws[l]
            dense_in = d0 if l == 0 else nin
            cnt = _select(l, S_LSH, W, Bs[l], ixs[l], qss[l], sids[l], svals[l], nin,
                          dense_in, 1.0, 1.0, 0.0, scap[l], sprobes[l], ids[l], z[l], z[l],
                          qi[l], qv[l], stats)
            m = 0
            for u in range(cnt):
                if z[l][u] > 0.0:
                    sids[l + 1][m] = ids[l][u]
                    svals[l + 1][m] = z[l][u]
                    m += 1
            nin = m
        _affine_rows(Ws[H], Bs[H], all_out, C, sids[H], svals[H], nin, logits)
        stats[ST_OUT_MULTS] += C * nin
        pred[ex] = np.argmax(logits)
