import numpy as np
import pytest

import gradcheck
from metamoe.moe import objective


# the acceptance suite checks seeds 0-19; these extend the coverage
@pytest.mark.parametrize("seed", range(20, 30))
def test_every_loss_every_parameter(seed):
    bad = [r for r in gradcheck.check(gradcheck.random_instance(seed)) if not r[3]]
    assert not bad, bad


def test_suite_covers_both_encoders_and_confidences():
    insts = [gradcheck.random_instance(s) for s in range(20)]
    assert {i.model.encoder.kind for i in insts} == {"mlp", "token"}
    assert {i.model.confidence for i in insts} == {"mcd", "negdist"}
    assert any(i.model.shared_metric for i in insts)
    assert any(i.model.classifier_bias for i in insts)
    assert {len(i.batches) for i in insts} == {2, 3, 4}


def test_total_is_weighted_sum_of_component_gradients():
    inst = gradcheck.random_instance(3)
    g = {c: gradcheck.analytic(inst, c) for c in ("moe", "mtl", "entropy", "adv", "total")}
    for k in g["total"]:
        combo = inst.lam * g["moe"][k] + (1 - inst.lam) * g["mtl"][k] + inst.gamma * g["adv"][k] + inst.eta * g["entropy"][k]
        np.testing.assert_allclose(g["total"][k], combo, atol=1e-12)


def test_zero_weights_zero_gradient(model3, batches3):
    # lambda = 1 removes the multi-task term; an unrelated adversary weight of 0 adds nothing
    _, g1 = objective(model3, batches3, lam=1.0, eta=0.0)
    _, g2 = objective(model3, batches3, target_inputs=batches3[0][0], lam=1.0, gamma=0.0, eta=0.0)
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])


def test_gradient_shapes(model3, batches3):
    _, grads = objective(model3, batches3, lam=0.5, eta=0.1)
    assert grads.keys() == model3.params.keys()
    for k, v in grads.items():
        assert v.shape == model3.params[k].shape
