import numpy as np
import pytest

import volrig.tensor as T
from volrig.network import (
    DEFAULT_GRANULARITY,
    GranularityParam,
    NetworkConfig,
    StackedHourglass,
    load_checkpoint,
    save_checkpoint,
)


def small_net(modules=2, seed=0, r=16):
    return StackedHourglass(NetworkConfig(resolution=r, num_modules=modules), seed=seed)


def rand_input(r=16, seed=0):
    return np.random.Generator(np.random.PCG64(seed)).standard_normal((r, r, r, 5))


def expected_module_shapes(r, cin):
    h = r // 2
    q = r // 4
    e = r // 8
    return [
        ("input", (r, r, r, cin)),
        ("down1", (h, h, h, cin)), ("enc1", (h, h, h, 16)),
        ("down2", (q, q, q, 16)), ("enc2", (q, q, q, 24)),
        ("down3", (e, e, e, 24)), ("enc3", (e, e, e, 36)),
        ("concat_control", (e, e, e, 40)), ("mid", (e, e, e, 40)),
        ("dec3", (e, e, e, 36)), ("up2", (q, q, q, 24)), ("dec2", (q, q, q, 24)),
        ("up1", (h, h, h, 16)), ("dec1", (h, h, h, 16)), ("up0", (r, r, r, 8)),
        ("joint_map", (r, r, r, 1)), ("bone_map", (r, r, r, 1)),
    ]


def test_shape_ladder_r16():
    net = small_net(modules=2)
    trace = []
    net.forward(rand_input(), DEFAULT_GRANULARITY, trace=trace)
    assert trace[0] == ("pre_features", (16, 16, 16, 8))
    per_module = (len(trace) - 1) // 2
    m1 = trace[1:1 + per_module]
    m2 = trace[1 + per_module:]
    assert m1 == expected_module_shapes(16, 8)
    assert m2 == expected_module_shapes(16, 10)   # prior maps concatenated


def test_output_maps_are_probabilities():
    net = small_net(modules=2)
    out = net.forward(rand_input(), 0.02)
    assert len(out.joint_maps) == len(out.bone_maps) == 2
    for m in out.joint_maps + out.bone_maps:
        assert m.data.shape == (16, 16, 16, 1)
        assert m.data.min() >= 0.0 and m.data.max() <= 1.0


def test_granularity_validation():
    net = small_net(modules=1)
    with pytest.raises(ValueError):
        net.forward(rand_input(), 1.5)
    with pytest.raises(ValueError):
        GranularityParam(-0.1)
    net.forward(rand_input(), GranularityParam(0.5))


def test_input_shape_validation():
    net = small_net(modules=1)
    with pytest.raises(ValueError):
        net.forward(np.zeros((8, 8, 8, 5)), 0.02)
    with pytest.raises(ValueError):
        NetworkConfig(resolution=30)
    with pytest.raises(ValueError):
        NetworkConfig(num_modules=0)


def test_deterministic_init_and_forward():
    a = small_net(seed=3).forward(rand_input(), 0.02).joint_maps[-1].data
    b = small_net(seed=3).forward(rand_input(), 0.02).joint_maps[-1].data
    assert np.array_equal(a, b)
    c = small_net(seed=4).forward(rand_input(), 0.02).joint_maps[-1].data
    assert not np.array_equal(a, c)


def test_granularity_changes_output():
    net = small_net(modules=1)
    a = net.forward(rand_input(), 0.0).joint_maps[-1].data
    b = net.forward(rand_input(), 1.0).joint_maps[-1].data
    assert not np.array_equal(a, b)


def test_parameter_count_frozen():
    # structural regression guard for the default 4-module network
    net = StackedHourglass(NetworkConfig(resolution=88, num_modules=4), seed=0)
    two = StackedHourglass(NetworkConfig(resolution=88, num_modules=2), seed=0)
    per_module = net.parameter_count() - \
        StackedHourglass(NetworkConfig(resolution=88, num_modules=3), seed=0).parameter_count()
    assert net.parameter_count() == two.parameter_count() + 2 * per_module
    assert net.parameter_count() == 2076138


def test_all_modules_receive_gradient():
    # intermediate supervision: module-1 branch parameters get nonzero grads
    net = small_net(modules=2)
    out = net.forward(rand_input(), 0.02, train=False)
    loss = T.sum_all(T.add(out.joint_maps[0], out.joint_maps[1]))
    loss = T.add(loss, T.sum_all(T.add(out.bone_maps[0], out.bone_maps[1])))
    T.zero_grad(net.parameters())
    loss.backward()
    for p in net.parameters():
        if p.name.startswith("stack.0.joint") or p.name.startswith("stack.0.bone"):
            assert p.grad is not None and np.abs(p.grad).max() > 0, p.name


def test_checkpoint_roundtrip(tmp_path):
    net = small_net(modules=2, seed=7)
    # perturb running stats so they must survive the round trip
    net.forward(rand_input(), 0.02, train=True)
    save_checkpoint(net, tmp_path / "ck")
    loaded = load_checkpoint(tmp_path / "ck")
    assert loaded.config.to_dict() == net.config.to_dict()
    a = net.state_dict()
    b = loaded.state_dict()
    assert set(a) == set(b)
    for k in a:
        assert np.array_equal(a[k], b[k]), k
    x = rand_input(seed=11)
    assert np.array_equal(net.forward(x, 0.02).joint_maps[-1].data,
                          loaded.forward(x, 0.02).joint_maps[-1].data)


def test_load_state_dict_validation(tmp_path):
    net = small_net(modules=1)
    sd = net.state_dict()
    bad = dict(sd)
    bad.pop(sorted(bad)[0])
    with pytest.raises(ValueError):
        net.load_state_dict(bad)
    bad2 = dict(sd)
    k = sorted(bad2)[0]
    bad2[k] = np.zeros((1, 2, 3))
    with pytest.raises(ValueError):
        net.load_state_dict(bad2)
