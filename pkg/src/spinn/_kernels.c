/* Dense matmul kernels with a fixed left-to-right summation order over k.
 *
 * Every output element is computed as ((0 + a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...
 * with separate multiply and add roundings (the build disables contraction),
 * so results are bit-identical to a naive triple loop regardless of how rows
 * are blocked or packed, and identical across batch sizes.
 *
 * Two code paths share that ordering:
 *   - row-accumulate for narrow inputs (M < MI): stream b row by row;
 *   - packed register tiles (MI x NJ accumulators) for M >= MI, with b
 *     repacked into column panels for sequential access.
 */

#define PY_SSIZE_T_CLEAN
#include <Python.h>

#define NPY_NO_DEPRECATED_API NPY_1_22_API_VERSION
#include <numpy/arrayobject.h>

#include <stdlib.h>

#define MI_F32 8
#define NJ_F32 32
#define MI_F64 4
#define NJ_F64 32

#define DEF_KERNELS(T, SUF, MI, NJ)                                           \
static void rowacc_##SUF(const T *restrict A, const T *restrict B,            \
                         T *restrict C, long M, long K, long N) {             \
    for (long i = 0; i < M; ++i) {                                            \
        T *crow = C + i * N;                                                  \
        for (long j = 0; j < N; ++j) crow[j] = 0;                             \
        for (long k = 0; k < K; ++k) {                                        \
            T aik = A[i * K + k];                                             \
            const T *brow = B + k * N;                                        \
            for (long j = 0; j < N; ++j) crow[j] += aik * brow[j];            \
        }                                                                     \
    }                                                                         \
}                                                                             \
                                                                              \
static void pack_##SUF(const T *restrict B, T *restrict P, long K, long N) {  \
    long npan = (N + NJ - 1) / NJ;                                            \
    for (long p = 0; p < npan; ++p) {                                         \
        long j0 = p * NJ;                                                     \
        long w = (N - j0 < NJ) ? N - j0 : NJ;                                 \
        T *dst = P + p * K * NJ;                                              \
        for (long k = 0; k < K; ++k) {                                        \
            const T *src = B + k * N + j0;                                    \
            long jj = 0;                                                      \
            for (; jj < w; ++jj) dst[k * NJ + jj] = src[jj];                  \
            for (; jj < NJ; ++jj) dst[k * NJ + jj] = 0;                       \
        }                                                                     \
    }                                                                         \
}                                                                             \
                                                                              \
static void tiles_##SUF(const T *restrict A, const T *restrict P,             \
                        T *restrict C, long M, long K, long N) {              \
    long MB = M - M % MI;                                                     \
    long npan = (N + NJ - 1) / NJ;                                            \
    for (long i0 = 0; i0 < MB; i0 += MI) {                                    \
        for (long p = 0; p < npan; ++p) {                                     \
            long j0 = p * NJ;                                                 \
            long w = (N - j0 < NJ) ? N - j0 : NJ;                             \
            const T *bp = P + p * K * NJ;                                     \
            T acc[MI][NJ];                                                    \
            for (int ii = 0; ii < MI; ++ii)                                   \
                for (int jj = 0; jj < NJ; ++jj) acc[ii][jj] = 0;              \
            for (long k = 0; k < K; ++k) {                                    \
                const T *brow = bp + k * NJ;                                  \
                for (int ii = 0; ii < MI; ++ii) {                             \
                    T aik = A[(i0 + ii) * K + k];                             \
                    for (int jj = 0; jj < NJ; ++jj)                           \
                        acc[ii][jj] += aik * brow[jj];                        \
                }                                                             \
            }                                                                 \
            for (int ii = 0; ii < MI; ++ii)                                   \
                for (long jj = 0; jj < w; ++jj)                               \
                    C[(i0 + ii) * N + j0 + jj] = acc[ii][jj];                 \
        }                                                                     \
    }                                                                         \
}                                                                             \
                                                                              \
static int mm_##SUF(const T *A, const T *B, T *C, long M, long K, long N,     \
                    T *P /* may be NULL */) {                                 \
    if (M < MI) {                                                             \
        rowacc_##SUF(A, B, C, M, K, N);                                       \
        return 0;                                                             \
    }                                                                         \
    T *tmp = NULL;                                                            \
    if (P == NULL) {                                                          \
        long npan = (N + NJ - 1) / NJ;                                        \
        tmp = (T *)malloc((size_t)npan * K * NJ * sizeof(T));                 \
        if (tmp == NULL) return -1;                                           \
        pack_##SUF(B, tmp, K, N);                                             \
        P = tmp;                                                              \
    }                                                                         \
    tiles_##SUF(A, P, C, M, K, N);                                            \
    long MB = M - M % MI;                                                     \
    if (MB < M)                                                               \
        rowacc_##SUF(A + MB * K, B, C + MB * N, M - MB, K, N);                \
    free(tmp);                                                                \
    return 0;                                                                 \
}

DEF_KERNELS(float, f32, MI_F32, NJ_F32)
DEF_KERNELS(double, f64, MI_F64, NJ_F64)

static int check_matrix(PyArrayObject *arr, const char *name, int ndim) {
    if (PyArray_NDIM(arr) != ndim) {
        PyErr_Format(PyExc_ValueError, "%s must be %d-dimensional", name, ndim);
        return -1;
    }
    if (!PyArray_IS_C_CONTIGUOUS(arr)) {
        PyErr_Format(PyExc_ValueError, "%s must be C-contiguous", name);
        return -1;
    }
    int t = PyArray_TYPE(arr);
    if (t != NPY_FLOAT32 && t != NPY_FLOAT64) {
        PyErr_Format(PyExc_ValueError, "%s must be float32 or float64", name);
        return -1;
    }
    return 0;
}

/* mm(a, b, out, packed=None): out <- a @ b */
static PyObject *py_mm(PyObject *self, PyObject *args) {
    PyArrayObject *a, *b, *out;
    PyObject *packed_obj = Py_None;
    if (!PyArg_ParseTuple(args, "O!O!O!|O", &PyArray_Type, &a, &PyArray_Type,
                          &b, &PyArray_Type, &out, &packed_obj))
        return NULL;
    if (check_matrix(a, "a", 2) || check_matrix(b, "b", 2) ||
        check_matrix(out, "out", 2))
        return NULL;
    int t = PyArray_TYPE(a);
    if (PyArray_TYPE(b) != t || PyArray_TYPE(out) != t) {
        PyErr_SetString(PyExc_ValueError, "dtype mismatch between a, b, out");
        return NULL;
    }
    long M = (long)PyArray_DIM(a, 0), K = (long)PyArray_DIM(a, 1);
    long K2 = (long)PyArray_DIM(b, 0), N = (long)PyArray_DIM(b, 1);
    if (K != K2 || PyArray_DIM(out, 0) != M || PyArray_DIM(out, 1) != N) {
        PyErr_Format(PyExc_ValueError,
                     "shape mismatch: a is %ldx%ld, b is %ldx%ld, out is %ldx%ld",
                     M, K, K2, N, (long)PyArray_DIM(out, 0),
                     (long)PyArray_DIM(out, 1));
        return NULL;
    }
    void *P = NULL;
    if (packed_obj != Py_None) {
        PyArrayObject *packed = (PyArrayObject *)packed_obj;
        if (!PyArray_Check(packed_obj) || check_matrix(packed, "packed", 1))
            return NULL;
        if (PyArray_TYPE(packed) != t) {
            PyErr_SetString(PyExc_ValueError, "packed dtype mismatch");
            return NULL;
        }
        long nj = (t == NPY_FLOAT32) ? NJ_F32 : NJ_F64;
        long need = ((N + nj - 1) / nj) * K * nj;
        if ((long)PyArray_DIM(packed, 0) < need) {
            PyErr_Format(PyExc_ValueError, "packed buffer too small: %ld < %ld",
                         (long)PyArray_DIM(packed, 0), need);
            return NULL;
        }
        P = PyArray_DATA(packed);
    }
    int rc;
    Py_BEGIN_ALLOW_THREADS
    if (t == NPY_FLOAT32)
        rc = mm_f32((const float *)PyArray_DATA(a), (const float *)PyArray_DATA(b),
                    (float *)PyArray_DATA(out), M, K, N, (float *)P);
    else
        rc = mm_f64((const double *)PyArray_DATA(a), (const double *)PyArray_DATA(b),
                    (double *)PyArray_DATA(out), M, K, N, (double *)P);
    Py_END_ALLOW_THREADS
    if (rc != 0)
        return PyErr_NoMemory();
    Py_RETURN_NONE;
}

/* pack(b, packed): fill the panel buffer for later mm calls with the same b */
static PyObject *py_pack(PyObject *self, PyObject *args) {
    PyArrayObject *b, *packed;
    if (!PyArg_ParseTuple(args, "O!O!", &PyArray_Type, &b, &PyArray_Type, &packed))
        return NULL;
    if (check_matrix(b, "b", 2) || check_matrix(packed, "packed", 1))
        return NULL;
    int t = PyArray_TYPE(b);
    if (PyArray_TYPE(packed) != t) {
        PyErr_SetString(PyExc_ValueError, "packed dtype mismatch");
        return NULL;
    }
    long K = (long)PyArray_DIM(b, 0), N = (long)PyArray_DIM(b, 1);
    long nj = (t == NPY_FLOAT32) ? NJ_F32 : NJ_F64;
    long need = ((N + nj - 1) / nj) * K * nj;
    if ((long)PyArray_DIM(packed, 0) < need) {
        PyErr_Format(PyExc_ValueError, "packed buffer too small: %ld < %ld",
                     (long)PyArray_DIM(packed, 0), need);
        return NULL;
    }
    Py_BEGIN_ALLOW_THREADS
    if (t == NPY_FLOAT32)
        pack_f32((const float *)PyArray_DATA(b), (float *)PyArray_DATA(packed), K, N);
    else
        pack_f64((const double *)PyArray_DATA(b), (double *)PyArray_DATA(packed), K, N);
    Py_END_ALLOW_THREADS
    Py_RETURN_NONE;
}

static PyMethodDef methods[] = {
    {"mm", py_mm, METH_VARARGS,
     "mm(a, b, out, packed=None): out <- a @ b with fixed left-to-right "
     "summation over k"},
    {"pack", py_pack, METH_VARARGS,
     "pack(b, packed): fill a column-panel buffer for reuse across mm calls"},
    {NULL, NULL, 0, NULL}};

static struct PyModuleDef moduledef = {
    PyModuleDef_HEAD_INIT, "_kernels", NULL, -1, methods,
};

PyMODINIT_FUNC PyInit__kernels(void) {
    PyObject *m = PyModule_Create(&moduledef);
    if (m == NULL)
        return NULL;
    import_array();
    if (PyModule_AddIntConstant(m, "MI_F32", MI_F32) ||
        PyModule_AddIntConstant(m, "NJ_F32", NJ_F32) ||
        PyModule_AddIntConstant(m, "MI_F64", MI_F64) ||
        PyModule_AddIntConstant(m, "NJ_F64", NJ_F64)) {
        Py_DECREF(m);
        return NULL;
    }
    return m;
}
