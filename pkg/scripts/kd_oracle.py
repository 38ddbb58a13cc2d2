"""Scalar recomputation of the mixed distillation loss, standard library only.

Student logits [0, 0], teacher logits [2, 0], label 1, alpha 0.5, tau 2.
Usage: python scripts/kd_oracle.py
"""
import math


def softmax(z, tau=1.0):
    e = [math.exp(v / tau) for v in z]
    s = sum(e)
    return [v / s for v in e]


def kd_value(student, teacher, label, alpha, tau):
    p = softmax(student)
    hard = -math.log(p[label])
    q_t = softmax(teacher, tau)
    p_s = softmax(student, tau)
    kl = sum(a * math.log(a / b) for a, b in zip(q_t, p_s))
    return alpha * hard + (1 - alpha) * tau * tau * kl, hard, kl


if __name__ == "__main__":
    total, hard, kl = kd_value([0.0, 0.0], [2.0, 0.0], 1, 0.5, 2.0)
    print(f"hard {hard:.6f}  kl {kl:.6f}  tau^2*kl {4 * kl:.6f}  total {total:.6f}")
