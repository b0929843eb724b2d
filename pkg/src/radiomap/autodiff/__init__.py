from .optim import Adam, AdamState, adam_step
from .gradcheck import check_gradients, numeric_grad, relative_error
from .tensor import (ShapeError, Tape, Tensor, add, avg_pool, backward, clamp, concat_channels,
                     conv2d, default_dtype, depthwise_conv2d, gelu, global_avg_pool, group_norm,
                     linear, matmul, mean_all, mse_loss, mul, neg, pad2d, precision, reshape, scale,
                     scale_channels, sigmoid, softmax, sum_all, transpose, upsample_nearest)


def scaled_dot_attention(x: Tensor, wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
                         wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor, heads: int = 1) -> Tensor:
    """Multi-head ``softmax(Q K^T / sqrt(d)) V`` with output projection; x is [N, T, D]."""
    n, t, d = x.shape
    if d % heads:
        raise ShapeError(f"attention width {d} not divisible by {heads} heads")
    dh = d // heads
    q, k, v = linear(x, wq, bq), linear(x, wk, bk), linear(x, wv, bv)
    if heads > 1:
        split = lambda z: transpose(reshape(z, (n, t, heads, dh)), (0, 2, 1, 3))
        q, k, v = split(q), split(k), split(v)
    logits = scale(matmul(q, transpose(k, (0, 1, 3, 2) if heads > 1 else (0, 2, 1))), dh ** -0.5)
    mixed = matmul(softmax(logits), v)
    if heads > 1:
        mixed = reshape(transpose(mixed, (0, 2, 1, 3)), (n, t, d))
    return linear(mixed, wo, bo)
