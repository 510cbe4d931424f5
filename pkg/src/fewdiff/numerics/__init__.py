from .tensor import (
    Tensor, ShapeError, NonFiniteError, no_grad, param, constant,
    add, sub, mul, exp, gelu, matmul, linear, softmax, log_softmax,
    layer_norm, reshape, transpose, swap_last2, broadcast_to, concat,
    embedding, gather_tokens, sum_, mean_, l2norm, l2_normalize,
    forward_backward,
)
from .kernels import set_backend, get_backend, available_backends
from .rng import make_rng, derive_seed
from .gradcheck import (
    finite_difference_gradient, relative_error, check_gradients,
    DEFAULT_H, DEFAULT_TOL,
)
