"""Linear-memory KL distillation of row-wise relation distributions."""
from .dense import DenseKLReport, dense_attention_kl, dense_relation_kl, logit_kl, prop1_gradients
from .errors import DegenerateRowError, InputError, ParameterError, ShapeError, TrainingDivergenceError
from .kernel import KernelResult, TileConfig, fit_linear, kernel_backward, kernel_forward, kernel_lse, measure_memory
from .ledger import AllocationLedger
from .objectives import HeadBatch, LossWeights, overall_loss, self_relation_kl
from .tensor import (MaskSpec, PrecisionPolicy, RowStats, masked_row_softmax, matmul_scaled, read_tensor,
                     row_logsumexp, write_tensor)
from .toy import RopeConfig, ToyModel, distill_step, forward_with_relations, rope_apply, token_budget

__version__ = "0.1.0"
