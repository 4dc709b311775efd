from dataclasses import dataclass, field

import numpy as np

MAX_STEPS = 2**62


def linear_decay(total_steps, final_fraction=0.0):
    """LR multiplier falling linearly from 1 to ``final_fraction`` over ``total_steps``."""
    total_steps = max(int(total_steps), 1)

    def schedule(step):
        frac = min(step, total_steps) / total_steps
        return 1.0 - (1.0 - final_fraction) * frac

    return schedule


def constant(step):
    return 1.0


@dataclass
class AdamState:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Adam with decoupled weight decay and a pluggable LR schedule.

    ``schedule(step)`` returns a multiplier on ``state.lr`` for the update
    being taken (step counts from 1).
    """

    def __init__(self, params, lr=1e-4, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8, schedule=constant):
        self.params = list(params)
        self.state = AdamState(lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps)
        self.state.m = [np.zeros_like(p.data) for p in self.params]
        self.state.v = [np.zeros_like(p.data) for p in self.params]
        self.schedule = schedule

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def current_lr(self):
        return self.state.lr * self.schedule(self.state.step + 1)

    def step(self, scale=1.0):
        """Apply one update from the accumulated ``.grad`` (times ``scale``)."""
        st = self.state
        if st.step >= MAX_STEPS:
            raise OverflowError("Adam step counter overflow")
        lr = self.current_lr()
        st.step += 1
        bc1 = 1.0 - st.beta1**st.step
        bc2 = 1.0 - st.beta2**st.step
        for p, m, v in zip(self.params, st.m, st.v):
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ValueError(f"grad shape {p.grad.shape} != param shape {p.data.shape}")
            g = p.grad * scale
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + st.eps)
            if st.weight_decay:
                update = update + st.weight_decay * p.data
            p.data -= lr * update
        return lr
