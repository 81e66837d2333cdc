#pragma once

// Selective timestep fusion and the ensemble classifier. Center features are
// compressed into a compact code, expanded into per-timestep channel weights
// (optionally conditioned on the global feature), softmax-normalized across
// timesteps, and used to blend one feature vector per sample.

#include <json.hpp>

#include "hsidiff/autograd.hpp"
#include "hsidiff/common.hpp"

namespace hsidiff {

enum class FuseMode { selective_guided, selective_noguide, average, manual };

inline FuseMode fuse_mode_from_string(const std::string& s) {
    if (s == "selective_guided") return FuseMode::selective_guided;
    if (s == "selective_noguide") return FuseMode::selective_noguide;
    if (s == "average") return FuseMode::average;
    if (s == "manual") return FuseMode::manual;
    throw ConfigError("unknown fusion mode: " + s);
}

inline std::string to_string(FuseMode m) {
    switch (m) {
        case FuseMode::selective_guided: return "selective_guided";
        case FuseMode::selective_noguide: return "selective_noguide";
        case FuseMode::average: return "average";
        default: return "manual";
    }
}

struct FuseConfig {
    size_t m = 0;            // timesteps per sample
    size_t K = 0;            // purified channel count
    size_t guide_dim = 0;    // global feature width
    size_t num_classes = 0;
    std::string mode = "selective_guided";
    size_t ensemble = 10;
    size_t hidden1 = 128, hidden2 = 64;
    size_t epochs = 100, batch_size = 64;
    double lr0 = 1e-4, lr_min = 5e-6;
    bool shared_fusion = false;
    size_t manual_timestep_index = 0;
    uint64_t seed = 0;

    size_t reduced() const { return std::max<size_t>(1, K / 2); }

    void validate() const {
        check_config(m >= 1 && K >= 1 && num_classes >= 2, "fusion: need m, K >= 1 and C >= 2");
        check_config(ensemble >= 1 && epochs >= 1 && batch_size >= 1,
                     "fusion: ensemble, epochs and batch size must be positive");
        check_config(lr0 > 0 && lr_min > 0 && lr_min <= lr0, "fusion: bad learning rates");
        FuseMode fm = fuse_mode_from_string(mode);
        if (fm == FuseMode::manual)
            check_config(manual_timestep_index < m, "fusion: manual timestep out of range");
        if (fm == FuseMode::selective_guided)
            check_config(guide_dim >= 1, "fusion: guided mode needs a global feature");
    }
};

inline void to_json(nlohmann::json& j, const FuseConfig& c) {
    j = nlohmann::json{{"m", c.m},
                       {"K", c.K},
                       {"guide_dim", c.guide_dim},
                       {"num_classes", c.num_classes},
                       {"mode", c.mode},
                       {"ensemble", c.ensemble},
                       {"hidden1", c.hidden1},
                       {"hidden2", c.hidden2},
                       {"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"lr0", c.lr0},
                       {"lr_min", c.lr_min},
                       {"shared_fusion", c.shared_fusion},
                       {"manual_timestep_index", c.manual_timestep_index},
                       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, FuseConfig& c) {
    j.at("m").get_to(c.m);
    j.at("K").get_to(c.K);
    j.at("guide_dim").get_to(c.guide_dim);
    j.at("num_classes").get_to(c.num_classes);
    j.at("mode").get_to(c.mode);
    j.at("ensemble").get_to(c.ensemble);
    j.at("hidden1").get_to(c.hidden1);
    j.at("hidden2").get_to(c.hidden2);
    j.at("epochs").get_to(c.epochs);
    j.at("batch_size").get_to(c.batch_size);
    j.at("lr0").get_to(c.lr0);
    j.at("lr_min").get_to(c.lr_min);
    j.at("shared_fusion").get_to(c.shared_fusion);
    j.at("manual_timestep_index").get_to(c.manual_timestep_index);
    j.at("seed").get_to(c.seed);
}

// ----------------------------- building blocks -----------------------------

template <class T>
struct Dense {
    Var<T> w, b;
};

template <class T>
struct BnAffine {
    Var<T> gamma, beta;
    std::shared_ptr<BatchNormState<T>> state;
};

template <class T>
using ParamList = std::vector<std::pair<std::string, Var<T>>>;

template <class T>
inline Dense<T> make_dense(ParamList<T>& reg, const std::string& name, size_t in, size_t out,
                           Rng& rng) {
    Dense<T> d;
    d.w = Var<T>::param(Tensor<T>::randn({out, in}, rng, T(1.0 / std::sqrt(double(in)))));
    d.b = Var<T>::param(Tensor<T>::zeros({out}));
    reg.emplace_back(name + ".w", d.w);
    reg.emplace_back(name + ".b", d.b);
    return d;
}

template <class T>
inline BnAffine<T> make_bn(ParamList<T>& reg, const std::string& name, size_t features) {
    BnAffine<T> bn;
    bn.gamma = Var<T>::param(Tensor<T>::full({features}, T(1)));
    bn.beta = Var<T>::param(Tensor<T>::zeros({features}));
    bn.state = std::make_shared<BatchNormState<T>>(features);
    reg.emplace_back(name + ".gamma", bn.gamma);
    reg.emplace_back(name + ".beta", bn.beta);
    return bn;
}

// [N,Fa] ++ [N,Fb] -> [N,Fa+Fb]
template <class T>
inline Var<T> concat_features(const Var<T>& a, const Var<T>& b) {
    size_t n = a.val().shape[0], fa = a.val().shape[1], fb = b.val().shape[1];
    return reshape(concat_channels(reshape(a, {n, fa, 1, 1}), reshape(b, {n, fb, 1, 1})),
                   {n, fa + fb});
}

// ----------------------------- fusion trunk -----------------------------

template <class T>
struct FusionTrunk {
    Dense<T> squeeze;              // K -> K_r
    BnAffine<T> bn;                // on K_r
    Dense<T> mix;                  // K_r -> K_r
    std::vector<Dense<T>> expand;  // per timestep, K_r -> K
    std::vector<Dense<T>> gate;    // per timestep, (K + guide) or K -> K
    bool guided = false;
};

template <class T>
inline std::shared_ptr<FusionTrunk<T>> make_trunk(ParamList<T>& reg, const FuseConfig& cfg,
                                                  Rng& rng, bool guided) {
    auto trunk = std::make_shared<FusionTrunk<T>>();
    trunk->guided = guided;
    size_t kr = cfg.reduced();
    trunk->squeeze = make_dense(reg, "fusion.squeeze", cfg.K, kr, rng);
    trunk->bn = make_bn(reg, "fusion.bn", kr);
    trunk->mix = make_dense(reg, "fusion.mix", kr, kr, rng);
    size_t gate_in = guided ? cfg.K + cfg.guide_dim : cfg.K;
    for (size_t i = 0; i < cfg.m; ++i) {
        trunk->expand.push_back(
            make_dense(reg, "fusion.expand" + std::to_string(i), kr, cfg.K, rng));
        trunk->gate.push_back(
            make_dense(reg, "fusion.gate" + std::to_string(i), gate_in, cfg.K, rng));
    }
    return trunk;
}

// c is [N,m,K]; collapse the timestep axis.
template <class T>
inline Var<T> sum_timesteps(const Var<T>& c) {
    return sum_axis1(c);
}

// Compact code z = mix(relu(bn(squeeze(c_t)))), shape [N,K_r].
template <class T>
inline Var<T> compact(const FusionTrunk<T>& trunk, const Var<T>& c_t, bool train) {
    Var<T> h = linear(c_t, trunk.squeeze.w, trunk.squeeze.b);
    h = batch_norm(h, trunk.bn.gamma, trunk.bn.beta, *trunk.bn.state, train);
    h = relu(h);
    return linear(h, trunk.mix.w, trunk.mix.b);
}

// Per-timestep channel weights, softmax-normalized across timesteps.
// guide is [N,m,guide_dim]; ignored when the trunk is unguided.
template <class T>
inline Var<T> selective_weights(const FusionTrunk<T>& trunk, const Var<T>& z,
                                const Var<T>* guide) {
    size_t m = trunk.expand.size();
    std::vector<Var<T>> raw;
    for (size_t i = 0; i < m; ++i) {
        Var<T> zi = linear(z, trunk.expand[i].w, trunk.expand[i].b);
        if (trunk.guided) {
            check_config(guide != nullptr, "selective_weights: guided trunk needs global rows");
            zi = concat_features(zi, slice_axis1(*guide, i));
        }
        raw.push_back(linear(zi, trunk.gate[i].w, trunk.gate[i].b));
    }
    return softmax_axis1(stack_axis1(raw));
}

// Literal uniform weights; running Average Fusion through the same blend
// keeps the two modes numerically identical where they should be.
template <class T>
inline Var<T> uniform_weights(size_t n, size_t m, size_t K) {
    return Var<T>::constant(Tensor<T>::full({n, m, K}, T(1) / static_cast<T>(m)));
}

// Blend: r = sum_i w_i * c_i with elementwise channel weights.
template <class T>
inline Var<T> fuse(const Var<T>& weights, const Var<T>& c) {
    return sum_axis1(mul(weights, c));
}

// ----------------------------- classifier head -----------------------------

template <class T>
struct Head {
    Dense<T> fc1, fc2, out;
    BnAffine<T> bn1, bn2;
};

template <class T>
inline Head<T> make_head(ParamList<T>& reg, const FuseConfig& cfg, Rng& rng) {
    Head<T> head;
    head.fc1 = make_dense(reg, "head.fc1", cfg.K, cfg.hidden1, rng);
    head.bn1 = make_bn(reg, "head.bn1", cfg.hidden1);
    head.fc2 = make_dense(reg, "head.fc2", cfg.hidden1, cfg.hidden2, rng);
    head.bn2 = make_bn(reg, "head.bn2", cfg.hidden2);
    head.out = make_dense(reg, "head.out", cfg.hidden2, cfg.num_classes, rng);
    return head;
}

template <class T>
inline Var<T> classify(const Head<T>& head, const Var<T>& r, bool train) {
    Var<T> h = relu(batch_norm(linear(r, head.fc1.w, head.fc1.b), head.bn1.gamma, head.bn1.beta,
                               *head.bn1.state, train));
    h = relu(batch_norm(linear(h, head.fc2.w, head.fc2.b), head.bn2.gamma, head.bn2.beta,
                        *head.bn2.state, train));
    return linear(h, head.out.w, head.out.b);
}

// ----------------------------- ensemble -----------------------------

template <class T>
struct Member {
    ParamList<T> params; // parameters this member trains, creation order
    std::shared_ptr<FusionTrunk<T>> trunk;
    Head<T> head;
};

template <class T>
struct EnsembleModel {
    FuseConfig cfg;
    std::vector<size_t> t_values;
    std::string bank_digest, purification_digest;
    std::vector<Member<T>> members;
    std::vector<std::vector<double>> loss_curves; // per member, per epoch
};

// c [N,m,K], guide [N,m,guide_dim] (may be empty in unguided modes).
template <class T>
inline Var<T> member_forward(const Member<T>& member, const FuseConfig& cfg, const Var<T>& c,
                             const Var<T>* guide, bool train) {
    FuseMode mode = fuse_mode_from_string(cfg.mode);
    Var<T> r;
    if (mode == FuseMode::selective_guided || mode == FuseMode::selective_noguide) {
        Var<T> z = compact(*member.trunk, sum_timesteps(c), train);
        Var<T> weights = selective_weights(*member.trunk, z, guide);
        r = fuse(weights, c);
    } else if (mode == FuseMode::average) {
        r = fuse(uniform_weights<T>(c.val().shape[0], cfg.m, cfg.K), c);
    } else {
        r = slice_axis1(c, cfg.manual_timestep_index);
    }
    return classify(member.head, r, train);
}

template <class T>
inline Member<T> make_member(const FuseConfig& cfg, size_t member_index,
                             const std::shared_ptr<FusionTrunk<T>>& shared_trunk) {
    Rng rng = make_rng(cfg.seed + member_index, 0x66757365);
    Member<T> member;
    FuseMode mode = fuse_mode_from_string(cfg.mode);
    bool selective = mode == FuseMode::selective_guided || mode == FuseMode::selective_noguide;
    if (selective) {
        if (shared_trunk)
            member.trunk = shared_trunk; // frozen, trained by member 0
        else
            member.trunk = make_trunk(member.params, cfg, rng, mode == FuseMode::selective_guided);
    }
    member.head = make_head(member.params, cfg, rng);
    return member;
}

// Rows are gathered out of the full banks per batch.
template <class T>
inline void gather_rows(const Tensor<float>& bank, const std::vector<size_t>& rows, size_t from,
                        size_t count, Tensor<T>& out) {
    size_t stride = bank.shape[1] * bank.shape[2];
    out = Tensor<T>({count, bank.shape[1], bank.shape[2]});
    for (size_t b = 0; b < count; ++b) {
        const float* src = bank.v.data() + rows[from + b] * stride;
        for (size_t j = 0; j < stride; ++j) out.v[b * stride + j] = static_cast<T>(src[j]);
    }
}

// Train E members on the given bank rows. Labels are 1-based and every class
// must appear; each member draws its own substream of the config seed.
template <class T>
EnsembleModel<T> train_ensemble(const Tensor<float>& center, const Tensor<float>& global_,
                                const std::vector<uint16_t>& labels,
                                const std::vector<size_t>& train_rows, const FuseConfig& cfg,
                                const std::vector<size_t>& t_values = {},
                                std::ostream* log = nullptr) {
    cfg.validate();
    check_config(center.shape.size() == 3 && center.shape[1] == cfg.m &&
                     center.shape[2] == cfg.K,
                 "train_ensemble: center bank shape mismatch");
    check_config(labels.size() == center.shape[0], "train_ensemble: one label per bank row");
    check_config(!train_rows.empty(), "train_ensemble: empty training set");
    FuseMode mode = fuse_mode_from_string(cfg.mode);
    bool guided = mode == FuseMode::selective_guided;
    if (guided)
        check_config(global_.shape.size() == 3 && global_.shape[0] == center.shape[0] &&
                         global_.shape[1] == cfg.m && global_.shape[2] == cfg.guide_dim,
                     "train_ensemble: global bank shape mismatch");
    std::vector<size_t> seen(cfg.num_classes, 0);
    for (size_t row : train_rows) {
        check_config(row < center.shape[0], "train_ensemble: row out of range");
        check_config(labels[row] >= 1 && labels[row] <= cfg.num_classes,
                     "train_ensemble: label out of range");
        ++seen[labels[row] - 1];
    }
    for (size_t j = 0; j < cfg.num_classes; ++j)
        check_config(seen[j] > 0, "train_ensemble: class " + std::to_string(j + 1) +
                                      " missing from the training split");

    EnsembleModel<T> model;
    model.cfg = cfg;
    model.t_values = t_values;

    for (size_t e = 0; e < cfg.ensemble; ++e) {
        std::shared_ptr<FusionTrunk<T>> shared;
        if (cfg.shared_fusion && e > 0 && model.members[0].trunk) shared = model.members[0].trunk;
        Member<T> member = make_member<T>(cfg, e, shared);

        Rng data_rng = make_rng(cfg.seed + e, 0x6f726465);
        std::vector<Var<T>> flat;
        for (auto& [name, var] : member.params) flat.push_back(var);
        Adam<T> adam;
        adam.init(flat);

        std::vector<size_t> order = train_rows;
        std::vector<double> curve;
        for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
            adam.lr = static_cast<T>(
                cosine_annealed_lr(cfg.lr0, cfg.lr_min, epoch, cfg.epochs));
            std::shuffle(order.begin(), order.end(), data_rng);
            double epoch_loss = 0;
            size_t batches = 0;
            for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
                size_t bs = std::min(cfg.batch_size, order.size() - start);
                Tensor<T> xc, xg;
                gather_rows(center, order, start, bs, xc);
                Var<T> c = Var<T>::constant(xc);
                Var<T> g;
                if (guided) {
                    gather_rows(global_, order, start, bs, xg);
                    g = Var<T>::constant(xg);
                }
                std::vector<size_t> y(bs);
                for (size_t b = 0; b < bs; ++b) y[b] = labels[order[start + b]] - 1;
                Var<T> logits = member_forward(member, cfg, c, guided ? &g : nullptr, true);
                Var<T> loss = cross_entropy(logits, y);
                adam.zero_grad(flat);
                backward(loss);
                adam.step(flat);
                epoch_loss += static_cast<double>(loss.val().v[0]);
                ++batches;
            }
            curve.push_back(epoch_loss / static_cast<double>(batches));
        }
        if (log)
            (*log) << "member " << e << " final loss " << curve.back() << "\n";
        model.members.push_back(std::move(member));
        model.loss_curves.push_back(std::move(curve));
    }
    return model;
}

// Majority vote over member argmaxes; vote ties resolve to the lowest
// class id. Returns 1-based class labels for the requested rows.
template <class T>
std::vector<uint16_t> predict(const EnsembleModel<T>& model, const Tensor<float>& center,
                              const Tensor<float>& global_, const std::vector<size_t>& rows,
                              size_t batch_size = 256) {
    const FuseConfig& cfg = model.cfg;
    bool guided = fuse_mode_from_string(cfg.mode) == FuseMode::selective_guided;
    size_t C = cfg.num_classes;
    std::vector<std::vector<size_t>> votes(rows.size(), std::vector<size_t>(C, 0));
    for (size_t start = 0; start < rows.size(); start += batch_size) {
        size_t bs = std::min(batch_size, rows.size() - start);
        Tensor<T> xc, xg;
        gather_rows(center, rows, start, bs, xc);
        Var<T> c = Var<T>::constant(xc);
        Var<T> g;
        if (guided) {
            gather_rows(global_, rows, start, bs, xg);
            g = Var<T>::constant(xg);
        }
        for (const Member<T>& member : model.members) {
            Var<T> logits = member_forward(member, cfg, c, guided ? &g : nullptr, false);
            for (size_t b = 0; b < bs; ++b) {
                const T* row = logits.val().v.data() + b * C;
                size_t arg = 0;
                for (size_t j = 1; j < C; ++j)
                    if (row[j] > row[arg]) arg = j;
                ++votes[start + b][arg];
            }
        }
    }
    std::vector<uint16_t> out(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        size_t arg = 0;
        for (size_t j = 1; j < C; ++j)
            if (votes[i][j] > votes[i][arg]) arg = j;
        out[i] = static_cast<uint16_t>(arg + 1);
    }
    return out;
}

// ----------------------------- persistence -----------------------------

template <class T>
inline void save_ensemble(const std::filesystem::path& dir, const EnsembleModel<T>& model) {
    std::filesystem::path tmp = dir;
    tmp += ".tmp";
    std::filesystem::remove_all(tmp);
    std::filesystem::create_directories(tmp);

    Fnv1a64 digest;
    nlohmann::json shapes = nlohmann::json::object();
    for (size_t e = 0; e < model.members.size(); ++e) {
        const Member<T>& member = model.members[e];
        char sub[16];
        std::snprintf(sub, sizeof sub, "member-%02zu", e);
        std::filesystem::create_directories(tmp / sub);
        nlohmann::json member_shapes = nlohmann::json::object();
        auto dump = [&](const std::string& name, const std::vector<T>& data,
                        const std::vector<size_t>& shape) {
            std::vector<float> f32(data.size());
            for (size_t i = 0; i < data.size(); ++i) f32[i] = static_cast<float>(data[i]);
            write_blob(tmp / sub / (name + ".bin"), f32.data(), f32.size());
            digest.update(f32.data(), f32.size() * sizeof(float));
            member_shapes[name] = shape;
        };
        bool own_trunk = member.trunk && !(model.cfg.shared_fusion && e > 0);
        for (const auto& [name, var] : member.params) {
            if (!own_trunk && name.rfind("fusion.", 0) == 0) continue;
            dump(name, var.val().v, var.val().shape);
        }
        auto dump_bn = [&](const std::string& name, const BnAffine<T>& bn) {
            dump(name + ".running_mean", bn.state->running_mean,
                 {bn.state->running_mean.size()});
            dump(name + ".running_var", bn.state->running_var, {bn.state->running_var.size()});
        };
        if (own_trunk) dump_bn("fusion.bn", member.trunk->bn);
        dump_bn("head.bn1", member.head.bn1);
        dump_bn("head.bn2", member.head.bn2);
        shapes[sub] = member_shapes;
    }

    nlohmann::json manifest;
    manifest["format"] = "hsidiff ensemble v1";
    manifest["config"] = model.cfg;
    manifest["t_values"] = model.t_values;
    manifest["bank_digest"] = model.bank_digest;
    manifest["purification_digest"] = model.purification_digest;
    manifest["loss_curves"] = model.loss_curves;
    manifest["param_shapes"] = shapes;
    manifest["param_digest"] = digest.hex();
    write_text_atomic(tmp / "manifest.json", manifest.dump(2) + "\n");

    std::filesystem::remove_all(dir);
    std::filesystem::rename(tmp, dir);
}

template <class T>
inline EnsembleModel<T> load_ensemble(const std::filesystem::path& dir) {
    nlohmann::json manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
    if (manifest.value("format", "") != std::string("hsidiff ensemble v1"))
        throw IoError("not an ensemble directory: " + dir.string());
    EnsembleModel<T> model;
    model.cfg = manifest.at("config").get<FuseConfig>();
    manifest.at("t_values").get_to(model.t_values);
    manifest.at("bank_digest").get_to(model.bank_digest);
    manifest.at("purification_digest").get_to(model.purification_digest);
    manifest.at("loss_curves").get_to(model.loss_curves);

    Fnv1a64 digest;
    for (size_t e = 0; e < model.cfg.ensemble; ++e) {
        std::shared_ptr<FusionTrunk<T>> shared;
        if (model.cfg.shared_fusion && e > 0 && !model.members.empty())
            shared = model.members[0].trunk;
        Member<T> member = make_member<T>(model.cfg, e, shared);
        char sub[16];
        std::snprintf(sub, sizeof sub, "member-%02zu", e);
        const nlohmann::json& member_shapes = manifest.at("param_shapes").at(sub);
        auto pull = [&](const std::string& name, std::vector<T>& out, size_t expected) {
            std::vector<size_t> shape;
            member_shapes.at(name).get_to(shape);
            size_t count = 1;
            for (size_t s : shape) count *= s;
            check_config(count == expected, "ensemble load: shape mismatch for " + name);
            std::vector<float> f32 = read_blob<float>(dir / sub / (name + ".bin"), count);
            digest.update(f32.data(), f32.size() * sizeof(float));
            out.resize(count);
            for (size_t i = 0; i < count; ++i) out[i] = static_cast<T>(f32[i]);
        };
        bool own_trunk = member.trunk && !(model.cfg.shared_fusion && e > 0);
        for (auto& [name, var] : member.params) {
            if (!own_trunk && name.rfind("fusion.", 0) == 0) continue;
            pull(name, var.mutable_val().v, var.val().v.size());
        }
        auto pull_bn = [&](const std::string& name, BnAffine<T>& bn) {
            pull(name + ".running_mean", bn.state->running_mean, bn.state->running_mean.size());
            pull(name + ".running_var", bn.state->running_var, bn.state->running_var.size());
        };
        if (own_trunk) pull_bn("fusion.bn", member.trunk->bn);
        pull_bn("head.bn1", member.head.bn1);
        pull_bn("head.bn2", member.head.bn2);
        model.members.push_back(std::move(member));
    }
    if (digest.hex() != manifest.at("param_digest").get<std::string>())
        throw DigestError("ensemble parameter digest mismatch in " + dir.string());
    return model;
}

} // namespace hsidiff
