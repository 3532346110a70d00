"""High-precision scalar values for cross-entropy, softened KL and one AdamW step.

Run directly; the printed numbers are frozen into the test suite.
"""

from mpmath import exp, log, mp, mpf, sqrt

mp.dps = 50


def softmax(z):
    m = max(z)
    e = [exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def cross_entropy(logits, label):
    return -log(softmax([mpf(v) for v in logits])[label])


def kl(p, q):
    return sum(a * (log(a) - log(b)) for a, b in zip(p, q))


def soft_kl(student, target_probs, T):
    p_s = softmax([mpf(v) / T for v in student])
    pseudo = [log(mpf(p) + mpf("1e-12")) for p in target_probs]
    p_t = softmax([v / T for v in pseudo])
    return T * T * kl(p_s, p_t), T * T * kl(p_t, p_s)


def adamw_one_step(w, g, lr=mpf("1e-3"), b1=mpf("0.9"), b2=mpf("0.999"), eps=mpf("1e-8"), wd=mpf("1e-4")):
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    m_hat = m / (1 - b1)
    v_hat = v / (1 - b2)
    return w - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * w


if __name__ == "__main__":
    print("ce [2,1,0] label 0:", mp.nstr(cross_entropy([2, 1, 0], 0), 20))
    s_first, t_first = soft_kl([1, 0, 0], [mpf("0.5"), mpf("0.25"), mpf("0.25")], mpf(2))
    print("soft KL as_written:", mp.nstr(s_first, 20))
    print("soft KL teacher_first:", mp.nstr(t_first, 20))
    print("ensemble:", [mp.nstr(x, 20) for x in
                        [(a + b) / 2 for a, b in zip(softmax([0, 0, log(4)]), softmax([log(4), 0, 0]))]])
    print("adamw w=1 g=0.5:", mp.nstr(adamw_one_step(mpf(1), mpf("0.5")), 20))
