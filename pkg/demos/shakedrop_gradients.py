"""One ShakeDrop join, forward and backward.

The forward pass scales the block branch by beta + alpha(1 - beta); the
backward pass scales its gradient by beta + gamma(1 - beta) with a fresh
gamma.  When the gate keeps the block (beta = 1) both are 1 and the join is
a plain residual.  At inference the branch is scaled by the expectation.
"""
import numpy as np

from flatland import tensor as T
from flatland.regularizers import ShakeDropConfig, shakedrop_forward, shakedrop_inference

cfg = ShakeDropConfig(gate_prob=0.5, per_example=True)
rng = np.random.default_rng(3)
residual = T.Tensor(np.zeros((6, 1, 1, 1)), requires_grad=True)
block = T.Tensor(np.ones((6, 1, 1, 1)), requires_grad=True)

out, sample = shakedrop_forward(residual, block, cfg, rng)
T.backward(T.sum_(out))

print("example  beta  alpha   forward  gamma   backward")
for i in range(6):
    print(f"{i:7d} {sample.beta[i, 0, 0, 0]:5.0f} {sample.alpha[i, 0, 0, 0]:6.3f} "
          f"{out.data[i, 0, 0, 0]:8.3f} {sample.gamma[i, 0, 0, 0]:6.3f} {block.grad[i, 0, 0, 0]:9.3f}")
print("residual gradient:", residual.grad.ravel())

inference = shakedrop_inference(residual, block, cfg)
print(f"inference coefficient: {inference.data.ravel()[0]:.3f} (p + E[alpha](1 - p) = {cfg.expected_coefficient()})")
