# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled grid kernels; behaviour matches ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef int DR[5]
cdef int DC[5]
DR[:] = [-1, 1, 0, 0, 0]
DC[:] = [0, 0, -1, 1, 0]


def bfs_distance(const unsigned char[:, :] obstacles, int goal_r, int goal_c):
    cdef Py_ssize_t m_r = obstacles.shape[0], m_c = obstacles.shape[1]
    dist_arr = np.full((m_r, m_c), -1, dtype=np.int32)
    cdef int[:, :] dist = dist_arr
    cdef cnp.ndarray[cnp.int32_t, ndim=1] qbuf = np.empty(m_r * m_c, dtype=np.int32)
    cdef int[:] queue = qbuf
    cdef Py_ssize_t head = 0, tail = 0
    cdef int r, c, nr, nc, k, d
    dist[goal_r, goal_c] = 0
    queue[tail] = goal_r * m_c + goal_c
    tail += 1
    while head < tail:
        r = queue[head] // m_c
        c = queue[head] % m_c
        head += 1
        d = dist[r, c] + 1
        for k in range(4):
            nr = r + DR[k]
            nc = c + DC[k]
            if 0 <= nr < m_r and 0 <= nc < m_c and obstacles[nr, nc] == 0 and dist[nr, nc] < 0:
                dist[nr, nc] = d
                queue[tail] = nr * m_c + nc
                tail += 1
    return dist_arr


def heuristic_planes(const unsigned char[:, :] obstacles, const int[:, :] dist):
    cdef Py_ssize_t m_r = obstacles.shape[0], m_c = obstacles.shape[1]
    out_arr = np.zeros((m_r, m_c, 4), dtype=np.uint8)
    cdef unsigned char[:, :, :] out = out_arr
    cdef int r, c, k, nr, nc, d
    for r in range(m_r):
        for c in range(m_c):
            d = dist[r, c]
            if obstacles[r, c] or d <= 0:
                continue
            for k in range(4):
                nr = r + DR[k]
                nc = c + DC[k]
                if 0 <= nr < m_r and 0 <= nc < m_c and obstacles[nr, nc] == 0 and dist[nr, nc] == d - 1:
                    out[r, c, k] = 1
    return out_arr


def resolve_moves(positions, actions, const unsigned char[:, :] obstacles):
    cdef Py_ssize_t n = len(positions)
    cdef Py_ssize_t m_r = obstacles.shape[0], m_c = obstacles.shape[1]
    cdef long[:, :] cur = np.ascontiguousarray(positions, dtype=np.int64)
    cdef long[:] act = np.ascontiguousarray(actions, dtype=np.int64)
    prop_arr = np.empty((n, 2), dtype=np.int64)
    cdef long[:, :] prop = prop_arr
    collided_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[:] collided = collided_arr
    # occupancy by current position and claim counts by proposed position
    occ_arr = np.full((m_r, m_c), -1, dtype=np.int64)
    cdef long[:, :] occ = occ_arr
    cnt_arr = np.zeros((m_r, m_c), dtype=np.int64)
    cdef long[:, :] cnt = cnt_arr
    reset_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[:] reset = reset_arr
    cdef Py_ssize_t i, j
    cdef long r, c
    cdef int rounds = 0, any_reset
    for i in range(n):
        occ[cur[i, 0], cur[i, 1]] = i
        r = cur[i, 0] + DR[act[i]]
        c = cur[i, 1] + DC[act[i]]
        if 0 <= r < m_r and 0 <= c < m_c and obstacles[r, c] == 0:
            prop[i, 0] = r
            prop[i, 1] = c
        else:
            prop[i, 0] = cur[i, 0]
            prop[i, 1] = cur[i, 1]
            collided[i] = act[i] != 4
    while True:
        any_reset = 0
        for i in range(n):
            cnt[prop[i, 0], prop[i, 1]] += 1
            reset[i] = 0
        for i in range(n):
            if prop[i, 0] == cur[i, 0] and prop[i, 1] == cur[i, 1]:
                continue
            if cnt[prop[i, 0], prop[i, 1]] > 1:
                reset[i] = 1
            j = occ[prop[i, 0], prop[i, 1]]
            if j >= 0 and j != i and prop[j, 0] == cur[i, 0] and prop[j, 1] == cur[i, 1]:
                reset[i] = 1
                reset[j] = 1
        for i in range(n):
            cnt[prop[i, 0], prop[i, 1]] = 0
        for i in range(n):
            if reset[i]:
                any_reset = 1
                prop[i, 0] = cur[i, 0]
                prop[i, 1] = cur[i, 1]
                collided[i] = 1
        if not any_reset:
            break
        rounds += 1
    return prop_arr, collided_arr.astype(bool), rounds


ctypedef fused real:
    float
    double


def im2col(const real[:, :, :, ::1] x, int k):
    """Zero-padded 'same' patches of an NHWC block, rows ordered (ky, kx, c)."""
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef int p = k // 2
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n * h * w, k * k * c), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, dy, dx, ch, row, col, si, sj
    with nogil:
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    row = (b * h + i) * w + j
                    for dy in range(k):
                        si = i + dy - p
                        if si < 0 or si >= h:
                            continue
                        for dx in range(k):
                            sj = j + dx - p
                            if sj < 0 or sj >= w:
                                continue
                            col = (dy * k + dx) * c
                            for ch in range(c):
                                out[row, col + ch] = x[b, si, sj, ch]
    return out_arr


def col2im(const real[:, ::1] cols, Py_ssize_t n, Py_ssize_t h, Py_ssize_t w, Py_ssize_t c, int k):
    """Adjoint of ``im2col``: scatter-add patch rows back onto the image."""
    cdef int p = k // 2
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, h, w, c), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, dy, dx, ch, row, col, si, sj
    with nogil:
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    row = (b * h + i) * w + j
                    for dy in range(k):
                        si = i + dy - p
                        if si < 0 or si >= h:
                            continue
                        for dx in range(k):
                            sj = j + dx - p
                            if sj < 0 or sj >= w:
                                continue
                            col = (dy * k + dx) * c
                            for ch in range(c):
                                out[b, si, sj, ch] += cols[row, col + ch]
    return out_arr
