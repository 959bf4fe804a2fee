#include "attnkit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "attnkit/attention.hpp"
#include "attnkit/backbone.hpp"
#include "attnkit/nn.hpp"
#include "attnkit/train.hpp"

namespace attnkit {

CheckScope check_scope_from_string(const std::string& s) {
    if (s == "ops") return CheckScope::ops;
    if (s == "attention") return CheckScope::attention;
    if (s == "end2end") return CheckScope::end2end;
    if (s == "all") return CheckScope::all;
    throw ConfigError("gradcheck: unknown scope '" + s + "'");
}

Scalar max_rel_err(const std::function<Tensor4()>& loss_fn, const std::vector<Tensor4*>& params,
                   Scalar step) {
    Tape tape;
    for (Tensor4* p : params) p->zero_grad();
    {
        TapeScope scope(tape);
        tape.backward(loss_fn());
    }
    Scalar worst = 0.0;
    for (Tensor4* p : params) {
        std::vector<Scalar> analytic(p->grad().begin(), p->grad().end());
        auto vals = p->mutable_values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const Scalar keep = vals[i];
            vals[i] = keep + step;
            const Scalar up = loss_fn().scalar_value();
            vals[i] = keep - step;
            const Scalar dn = loss_fn().scalar_value();
            vals[i] = keep;
            const Scalar fd = (up - dn) / (2 * step);
            const Scalar err = std::abs(fd - analytic[i]) /
                               std::max({std::abs(fd), std::abs(analytic[i]), Scalar(1)});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

namespace {

constexpr Scalar kOpTol = 1e-4;
constexpr Scalar kEndToEndTol = 1e-3;

// Uniform values bounded away from zero, for kinked ops (relu) where a
// finite-difference step across the kink would be meaningless.
Tensor4 away_from_zero(Shape4 shape, Rng& rng) {
    Tensor4 t = Tensor4::zeros(shape, true);
    for (auto& v : t.mutable_values()) {
        const Scalar mag = rng.uniform(0.05, 1.0);
        v = rng.uniform(0.0, 1.0) < 0.5 ? -mag : mag;
    }
    return t;
}

struct Case {
    std::string name;
    Scalar tolerance;
    // Returns the worst relative error for one seeded instance.
    std::function<Scalar(Rng&)> run;
};

Tensor4 cotangent(Shape4 shape, Rng& rng) { return Tensor4::uniform(shape, -1.0, 1.0, rng); }

std::vector<Case> op_cases() {
    std::vector<Case> cases;
    auto add_case = [&](std::string name, std::function<Scalar(Rng&)> fn) {
        cases.push_back(Case{std::move(name), kOpTol, std::move(fn)});
    };

    add_case("add", [](Rng& rng) {
        Tensor4 a = Tensor4::uniform({2, 3, 4, 4}, -1, 1, rng, true);
        Tensor4 b = Tensor4::uniform({2, 3, 1, 4}, -1, 1, rng, true);
        Tensor4 w = cotangent({2, 3, 4, 4}, rng);
        auto loss = [&] { return sum(mul(add(a, b), w)); };
        return max_rel_err(loss, {&a, &b});
    });
    add_case("mul", [](Rng& rng) {
        Tensor4 a = Tensor4::uniform({2, 3, 4, 4}, -1, 1, rng, true);
        Tensor4 b = Tensor4::uniform({2, 3, 4, 4}, -1, 1, rng, true);
        Tensor4 w = cotangent({2, 3, 4, 4}, rng);
        auto loss = [&] { return sum(mul(mul(a, b), w)); };
        return max_rel_err(loss, {&a, &b});
    });
    add_case("broadcast_mul", [](Rng& rng) {
        Tensor4 a = Tensor4::uniform({2, 4, 3, 3}, -1, 1, rng, true);
        Tensor4 b = Tensor4::uniform({2, 1, 3, 3}, -1, 1, rng, true);
        Tensor4 w = cotangent({2, 4, 3, 3}, rng);
        auto loss = [&] { return sum(mul(broadcast_mul(a, b), w)); };
        return max_rel_err(loss, {&a, &b});
    });
    add_case("scale", [](Rng& rng) {
        Tensor4 a = Tensor4::uniform({1, 3, 4, 4}, -1, 1, rng, true);
        const Scalar f = rng.uniform(0.2, 2.0);
        Tensor4 w = cotangent({1, 3, 4, 4}, rng);
        auto loss = [&] { return sum(mul(scale(a, f), w)); };
        return max_rel_err(loss, {&a});
    });
    add_case("permute", [](Rng& rng) {
        Tensor4 a = Tensor4::uniform({2, 3, 4, 5}, -1, 1, rng, true);
        Tensor4 w = cotangent({2, 5, 3, 4}, rng);
        auto loss = [&] { return sum(mul(permute(a, {3, 1, 2}), w)); };
        return max_rel_err(loss, {&a});
    });
    add_case("flip", [](Rng& rng) {
        Tensor4 a = Tensor4::uniform({2, 3, 4, 5}, -1, 1, rng, true);
        Tensor4 w = cotangent({2, 3, 4, 5}, rng);
        auto loss = [&] { return sum(mul(flip(a, 2), w)); };
        return max_rel_err(loss, {&a});
    });
    add_case("sum", [](Rng& rng) {
        Tensor4 a = Tensor4::uniform({2, 3, 4, 4}, -1, 1, rng, true);
        auto loss = [&] { return sum(a); };
        return max_rel_err(loss, {&a});
    });
    add_case("pick", [](Rng& rng) {
        Tensor4 a = Tensor4::uniform({2, 3, 4, 4}, -1, 1, rng, true);
        auto loss = [&] { return pick(a, 1, 2, 3, 0); };
        return max_rel_err(loss, {&a});
    });
    add_case("conv2d", [](Rng& rng) {
        Conv2dState s = Conv2dState::make(3, 2, 3, 2, 1, true, rng);
        Tensor4 x = Tensor4::uniform({2, 2, 5, 5}, -1, 1, rng, true);
        Tensor4 w = cotangent({2, 3, 3, 3}, rng);
        auto loss = [&] { return sum(mul(conv2d(x, s), w)); };
        return max_rel_err(loss, {&x, &s.weight, &s.bias});
    });
    add_case("batchnorm2d_train", [](Rng& rng) {
        BatchNorm2dState s = BatchNorm2dState::make(3);
        s.gamma = Tensor4::uniform({1, 3, 1, 1}, 0.5, 1.5, rng, true);
        s.beta = Tensor4::uniform({1, 3, 1, 1}, -0.5, 0.5, rng, true);
        Tensor4 x = Tensor4::uniform({2, 3, 4, 4}, -2, 2, rng, true);
        Tensor4 w = cotangent({2, 3, 4, 4}, rng);
        auto loss = [&] {
            BatchNorm2dState fresh = s;  // keep running stats untouched per call
            fresh.running_mean = Tensor4::zeros({1, 3, 1, 1});
            fresh.running_var = Tensor4::constant({1, 3, 1, 1}, 1.0);
            return sum(mul(batchnorm2d(x, fresh), w));
        };
        return max_rel_err(loss, {&x, &s.gamma, &s.beta});
    });
    add_case("batchnorm2d_eval", [](Rng& rng) {
        BatchNorm2dState s = BatchNorm2dState::make(3);
        s.mode = Mode::eval;
        s.gamma = Tensor4::uniform({1, 3, 1, 1}, 0.5, 1.5, rng, true);
        s.beta = Tensor4::uniform({1, 3, 1, 1}, -0.5, 0.5, rng, true);
        for (auto& v : s.running_mean.mutable_values()) v = rng.uniform(-0.3, 0.3);
        for (auto& v : s.running_var.mutable_values()) v = rng.uniform(0.4, 1.5);
        Tensor4 x = Tensor4::uniform({2, 3, 4, 4}, -2, 2, rng, true);
        Tensor4 w = cotangent({2, 3, 4, 4}, rng);
        auto loss = [&] { return sum(mul(batchnorm2d(x, s), w)); };
        return max_rel_err(loss, {&x, &s.gamma, &s.beta});
    });
    add_case("gap", [](Rng& rng) {
        Tensor4 x = Tensor4::uniform({2, 4, 5, 5}, -1, 1, rng, true);
        Tensor4 w = cotangent({2, 4, 1, 1}, rng);
        auto loss = [&] { return sum(mul(gap(x), w)); };
        return max_rel_err(loss, {&x});
    });
    add_case("gmp", [](Rng& rng) {
        Tensor4 x = Tensor4::uniform({2, 4, 5, 5}, -1, 1, rng, true);
        Tensor4 w = cotangent({2, 4, 1, 1}, rng);
        auto loss = [&] { return sum(mul(gmp(x), w)); };
        return max_rel_err(loss, {&x});
    });
    add_case("zpool", [](Rng& rng) {
        Tensor4 x = Tensor4::uniform({2, 4, 5, 5}, -1, 1, rng, true);
        Tensor4 w = cotangent({2, 2, 5, 5}, rng);
        auto loss = [&] { return sum(mul(zpool(x), w)); };
        return max_rel_err(loss, {&x});
    });
    add_case("maxpool2d", [](Rng& rng) {
        Tensor4 x = Tensor4::uniform({2, 3, 6, 6}, -1, 1, rng, true);
        Tensor4 w = cotangent({2, 3, 3, 3}, rng);
        auto loss = [&] { return sum(mul(maxpool2d(x, 3, 2, 1), w)); };
        return max_rel_err(loss, {&x});
    });
    add_case("sigmoid", [](Rng& rng) {
        Tensor4 x = Tensor4::uniform({2, 3, 4, 4}, -3, 3, rng, true);
        Tensor4 w = cotangent({2, 3, 4, 4}, rng);
        auto loss = [&] { return sum(mul(sigmoid(x), w)); };
        return max_rel_err(loss, {&x});
    });
    add_case("relu", [](Rng& rng) {
        Tensor4 x = away_from_zero({2, 3, 4, 4}, rng);
        Tensor4 w = cotangent({2, 3, 4, 4}, rng);
        auto loss = [&] { return sum(mul(relu(x), w)); };
        return max_rel_err(loss, {&x});
    });
    add_case("mlp2", [](Rng& rng) {
        Mlp2State s = Mlp2State::make(8, 4, rng);
        Tensor4 x = Tensor4::uniform({2, 8, 1, 1}, -1, 1, rng, true);
        Tensor4 w = cotangent({2, 8, 1, 1}, rng);
        auto loss = [&] { return sum(mul(mlp2(x, s), w)); };
        return max_rel_err(loss, {&x, &s.w0, &s.w1});
    });
    add_case("cross_entropy", [](Rng& rng) {
        Tensor4 logits = Tensor4::uniform({4, 5, 1, 1}, -2, 2, rng, true);
        std::vector<int> labels;
        for (int i = 0; i < 4; ++i) labels.push_back(static_cast<int>(rng.index(5)));
        auto loss = [&] { return cross_entropy_mean(logits, labels); };
        return max_rel_err(loss, {&logits});
    });
    return cases;
}

std::vector<Case> attention_cases() {
    std::vector<Case> cases;
    auto add_case = [&](std::string name, std::function<Scalar(Rng&)> fn) {
        cases.push_back(Case{std::move(name), kOpTol, std::move(fn)});
    };

    add_case("gate_forward", [](Rng& rng) {
        AttentionGateState g = AttentionGateState::make(3, rng);
        g.bn.mode = Mode::eval;
        for (auto& v : g.bn.running_var.mutable_values()) v = rng.uniform(0.4, 1.2);
        Tensor4 x = Tensor4::uniform({1, 4, 5, 5}, -1, 1, rng, true);
        Tensor4 w = cotangent({1, 1, 5, 5}, rng);
        auto loss = [&] { return sum(mul(gate_forward(x, g), w)); };
        return max_rel_err(loss, {&x, &g.conv.weight, &g.bn.gamma, &g.bn.beta});
    });
    add_case("triplet_forward", [](Rng& rng) {
        TripletAttentionConfig cfg;
        cfg.kernel = 3;
        TripletAttentionState s = TripletAttentionState::make(cfg, rng);
        s.set_mode(Mode::eval);
        Tensor4 x = Tensor4::uniform({1, 4, 5, 5}, -1, 1, rng, true);
        Tensor4 w = cotangent({1, 4, 5, 5}, rng);
        auto loss = [&] { return sum(mul(triplet_forward(x, s), w)); };
        return max_rel_err(loss, {&x, &s.gate_ch.conv.weight, &s.gate_cw.conv.weight,
                                  &s.gate_hw.conv.weight, &s.gate_ch.bn.gamma,
                                  &s.gate_hw.bn.beta});
    });
    add_case("cbam_forward", [](Rng& rng) {
        CbamState s = CbamState::make(4, 2, 3, rng);
        s.set_mode(Mode::eval);
        Tensor4 x = Tensor4::uniform({1, 4, 5, 5}, -1, 1, rng, true);
        Tensor4 w = cotangent({1, 4, 5, 5}, rng);
        auto loss = [&] { return sum(mul(cbam_forward(x, s), w)); };
        return max_rel_err(loss, {&x, &s.mlp.w0, &s.mlp.w1, &s.spatial.conv.weight});
    });
    add_case("se_forward", [](Rng& rng) {
        SeState s = SeState::make(8, 4, rng);
        Tensor4 x = Tensor4::uniform({1, 8, 4, 4}, -1, 1, rng, true);
        Tensor4 w = cotangent({1, 8, 4, 4}, rng);
        auto loss = [&] { return sum(mul(se_forward(x, s), w)); };
        return max_rel_err(loss, {&x, &s.mlp.w0, &s.mlp.w1});
    });
    return cases;
}

Case end2end_case() {
    Case c;
    c.name = "end2end_2block";
    c.tolerance = kEndToEndTol;
    c.run = [](Rng& rng) {
        ArchSpec spec;
        spec.block_type = BlockType::resnet_basic;
        spec.stage_channels = {{4, 1, 1}, {8, 1, 2}};
        spec.attention.kind = AttentionKind::triplet;
        spec.attention.kernel = 3;
        spec.num_classes = 3;
        spec.in_channels = 3;
        spec.in_height = 6;
        spec.in_width = 6;
        Network net = build(spec, rng.next_u64());

        Tensor4 x = Tensor4::uniform({2, 3, 6, 6}, 0.0, 1.0, rng);
        std::vector<int> labels = {static_cast<int>(rng.index(3)),
                                   static_cast<int>(rng.index(3))};
        auto loss = [&] {
            return cross_entropy_mean(net.forward(x, Mode::train), labels);
        };
        std::vector<Tensor4*> params;
        for (auto& e : net.registry().mutable_entries()) {
            if (e.trainable) params.push_back(&e.tensor);
        }
        return max_rel_err(loss, params);
    };
    return c;
}

}  // namespace

std::vector<std::string> registered_ops() {
    std::vector<std::string> names;
    for (const auto& c : op_cases()) names.push_back(c.name);
    return names;
}

std::vector<CheckResult> run_gradcheck(CheckScope scope, int instances, std::uint64_t seed) {
    std::vector<Case> cases;
    if (scope == CheckScope::ops || scope == CheckScope::all) {
        auto ops = op_cases();
        cases.insert(cases.end(), std::make_move_iterator(ops.begin()),
                     std::make_move_iterator(ops.end()));
    }
    if (scope == CheckScope::attention || scope == CheckScope::all) {
        auto att = attention_cases();
        cases.insert(cases.end(), std::make_move_iterator(att.begin()),
                     std::make_move_iterator(att.end()));
    }
    if (scope == CheckScope::end2end || scope == CheckScope::all) {
        cases.push_back(end2end_case());
    }

    std::vector<CheckResult> results;
    for (std::size_t ci = 0; ci < cases.size(); ++ci) {
        CheckResult r;
        r.name = cases[ci].name;
        r.instances = instances;
        r.tolerance = cases[ci].tolerance;
        for (int k = 0; k < instances; ++k) {
            Rng rng(seed + 1000003ULL * ci + static_cast<std::uint64_t>(k));
            r.max_rel_err = std::max(r.max_rel_err, cases[ci].run(rng));
        }
        r.pass = r.max_rel_err < r.tolerance;
        results.push_back(std::move(r));
    }
    return results;
}

std::string gradcheck_report(const std::vector<CheckResult>& results) {
    std::ostringstream os;
    char line[128];
    std::snprintf(line, sizeof(line), "%-20s %10s %14s %10s %6s\n", "operation", "instances",
                  "max rel err", "tolerance", "pass");
    os << line;
    for (const auto& r : results) {
        std::snprintf(line, sizeof(line), "%-20s %10d %14.3e %10.0e %6s\n", r.name.c_str(),
                      r.instances, r.max_rel_err, r.tolerance, r.pass ? "yes" : "NO");
        os << line;
    }
    return os.str();
}

bool all_passed(const std::vector<CheckResult>& results) {
    for (const auto& r : results) {
        if (!r.pass) return false;
    }
    return !results.empty();
}

}  // namespace attnkit
