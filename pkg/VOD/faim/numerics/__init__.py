# -*- encoding: utf-8 -*-
from .tensor import (FlopCounter, Function, Parameters, Tensor, as_tensor,
                     count_macs, debug_mode, float64_mode, flop_counter,
                     grad_enabled, no_grad, tensor)
from .functional import (add, attention_heads, avg_pool2x2, bce_with_logits,
                         bilinear_resize, binary_cross_entropy, concat,
                         conv2d, conv_transpose2x2, cross_entropy, div,
                         getitem, init_attention, interpolation_matrix,
                         linear, log_softmax, matmul, maximum, mean, minimum,
                         mul, multi_head_attention, relu, reshape, resample,
                         roi_resample, sigmoid, silu, sliding_window, softmax,
                         stack, sub, tabs, transpose, tsum)
from .gradcheck import grad_check
from .tensorio import (load_parameters, load_tensor, read_index,
                       save_parameters, save_tensor)
