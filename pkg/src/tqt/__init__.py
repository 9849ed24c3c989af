"""Power-of-2 quantization with thresholds trained in the log domain.

The package splits into layers that compose through the graph IR:

- `quantize`: the uniform symmetric quantizer, its custom gradients,
  and the affine requantization identity.
- `calibrate`: threshold initialization from statistics (max, n-SD,
  percentile, KL divergence on histograms).
- `optim`: Adam and friends, the stability guidelines, learning rate
  schedules, and incremental threshold freezing.
- `graph` / `transforms`: textual IR plus the float rewrites and the
  quantize-node insertion pass.
- `train`: calibration plus quantized fine-tuning on the bundled task.
- `fxp`: lowering to an integer-only runtime that is bit-exact with
  the float emulation.
- `toy`: 1-D threshold training dynamics and oscillation analysis.
"""

from .quantize import (QuantizerParams, affine_product_demo, bankers_round,
                       fakequant_clipped, gradient_check, int_range,
                       quantize_backward, quantize_forward, quantize_int,
                       scale_from_log_threshold)
from .calibrate import (Histogram, calib_klj, calib_max, calib_nsd,
                        calib_percentile, threshold_policy)
from .optim import (AdamState, FreezeController, Guidelines, NormedGradState,
                    adam_guidelines, adam_step, freeze_start_step,
                    lr_schedule, normed_grad, sgd_step)
from .graph import (Graph, Node, load_graph, parse_graph, save_graph,
                    serialize_graph, topo_order)
from .transforms import (PrecisionConfig, avgpool_to_dwconv, collapse_concat,
                         fold_batchnorm, insert_quant_layers, optimize,
                         splice_identity)
from .execute import build_tape, run
from .data import Dataset, load_dataset, make_dataset, save_dataset
from .train import (TrainReport, TrainRunConfig, calibrate_graph,
                    calibration_batch, evaluate, float_retrain,
                    run_desk_suite, train_quantized)
from .fxp import (BitexactReport, bitexact_check, execute_integer,
                  load_bundle, lower, save_bundle, shift_requant)
from .toy import (ToyConfig, Trajectory, compare_clipped_vs_tqt,
                  measure_oscillation, toy_l2_run)
from .tensor import Rng, load_tensor, save_tensor

__version__ = "0.1.0"
