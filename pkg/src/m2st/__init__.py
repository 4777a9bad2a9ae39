"""Meta two-sample testing: learned-kernel MMD tests with meta-learned and multi-kernel adaptation."""
from .estimators import JConfig, h_matrix, j_hat, j_hat_value, mmd2_u, mmd2_u_value, var_hat
from .kernels import DeepKernel, GaussianKernel, MixtureKernel
from .learners import (LearnedAlgorithm, MetaKLConfig, MKLConfig, TrainConfig, adapt, meta_kl_train,
                       meta_mkl_train, train_agt, train_direct, train_mmd_o)
from .tasks import HDGMSpec, MetaSampleBank, TaskFamilySpec, build_family, hdgm_pair, load_csv
from .testing import SplitSpec, TestOutcome, permutation_test, rejection_rate, split

__version__ = "0.1.0"
