# Pin BLAS/OpenMP pools to one thread before numpy loads anywhere so the
# bit-exact determinism tests are meaningful.
import os

for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, "1")
