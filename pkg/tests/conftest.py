"""Pin BLAS pools to one thread before numpy loads anywhere.

Reproducibility of the training tests depends on bitwise-identical float
reductions, which multi-threaded GEMM does not guarantee. Must run before
the first numpy import, hence conftest and not a fixture.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
