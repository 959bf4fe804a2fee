#include "attnkit/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "attnkit/complexity.hpp"
#include "attnkit/nn.hpp"
#include "attnkit/serialize.hpp"

namespace attnkit {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed,
                    const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed) {
            if (it.key() == k) {
                ok = true;
                break;
            }
        }
        if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
}

DatasetConfig dataset_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config.dataset must be an object");
    reject_unknown(j, {"type", "classes", "train_n", "eval_n", "noise", "path", "mean", "std"},
                   "config.dataset");
    DatasetConfig d;
    const std::string type = j.value("type", "synthetic");
    if (type == "synthetic") {
        d.kind = DatasetConfig::Kind::synthetic;
    } else if (type == "cifar10-binary") {
        d.kind = DatasetConfig::Kind::cifar10_binary;
        d.path = j.value("path", "");
        if (d.path.empty()) throw ConfigError("config.dataset: cifar10-binary needs a path");
    } else {
        throw ConfigError("config.dataset: unknown type '" + type + "'");
    }
    d.classes = j.value("classes", 2);
    d.train_n = j.value("train_n", 64);
    d.eval_n = j.value("eval_n", 32);
    d.noise = j.value("noise", 0.0);
    if (j.contains("mean")) d.mean = j.at("mean").get<std::vector<Scalar>>();
    if (j.contains("std")) d.stdev = j.at("std").get<std::vector<Scalar>>();
    if (d.mean.size() != d.stdev.size()) {
        throw ConfigError("config.dataset: mean and std must have the same length");
    }
    return d;
}

}  // namespace

TrainConfig train_config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config: document must be a JSON object");
    reject_unknown(j,
                   {"arch", "optimizer", "epochs", "batch_size", "seed", "dataset", "checkpoint"},
                   "config");
    TrainConfig cfg;
    try {
        if (!j.contains("arch")) throw ConfigError("config: missing arch");
        if (j.at("arch").is_string()) {
            cfg.arch = arch_from_json_file(j.at("arch").get<std::string>());
        } else {
            cfg.arch = arch_from_json_text(j.at("arch").dump());
        }
        if (j.contains("optimizer")) {
            const json& o = j.at("optimizer");
            reject_unknown(o, {"type", "learning_rate", "momentum", "weight_decay"},
                           "config.optimizer");
            const std::string type = o.value("type", "sgd-momentum");
            if (type != "sgd-momentum") {
                throw ConfigError("config.optimizer: unknown type '" + type + "'");
            }
            cfg.optimizer.learning_rate = o.value("learning_rate", 0.1);
            cfg.optimizer.momentum = o.value("momentum", 0.9);
            cfg.optimizer.weight_decay = o.value("weight_decay", 5e-4);
        }
        cfg.epochs = j.value("epochs", 10);
        cfg.batch_size = j.value("batch_size", 8);
        cfg.seed = j.value("seed", 1ULL);
        if (j.contains("dataset")) cfg.dataset = dataset_from_json(j.at("dataset"));
        cfg.checkpoint = j.value("checkpoint", "checkpoint.bin");
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (cfg.optimizer.learning_rate < 0.0) {
        throw ConfigError("config: learning_rate must be >= 0");
    }
    if (cfg.epochs < 1) throw ConfigError("config: epochs must be >= 1");
    if (cfg.batch_size < 2) throw ConfigError("config: batch_size must be >= 2");
    return cfg;
}

TrainConfig train_config_from_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open '" + path + "'");
    std::stringstream buf;
    buf << is.rdbuf();
    return train_config_from_json_text(buf.str());
}

// ---- optimizer ----

SgdOptimizer::SgdOptimizer(Network& net, OptimizerConfig cfg) : net_(&net), cfg_(cfg) {
    for (const auto& e : net.registry().entries()) {
        if (e.trainable) {
            velocities_.add(e.name, Tensor4::zeros(e.tensor.shape()), false);
        }
    }
}

void SgdOptimizer::zero_grad() {
    for (auto& e : net_->registry().mutable_entries()) {
        if (e.trainable) e.tensor.zero_grad();
    }
}

void SgdOptimizer::step(Scalar learning_rate) {
    auto& params = net_->registry().mutable_entries();
    auto& vels = velocities_.mutable_entries();
    std::size_t vi = 0;
    for (auto& e : params) {
        if (!e.trainable) continue;
        auto w = e.tensor.mutable_values();
        auto g = e.tensor.grad();
        auto v = vels[vi++].tensor.mutable_values();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const Scalar grad = g[i] + cfg_.weight_decay * w[i];
            v[i] = cfg_.momentum * v[i] + grad;
            w[i] -= learning_rate * v[i];
        }
    }
}

Scalar schedule_lr(const OptimizerConfig& cfg, int epoch, int total_epochs) {
    Scalar lr = cfg.learning_rate;
    if (epoch >= total_epochs / 2) lr *= 0.1;
    if (epoch >= total_epochs * 3 / 4) lr *= 0.1;
    return lr;
}

// ---- data ----

void load_datasets(const TrainConfig& cfg, DatasetHandle& train, DatasetHandle& eval) {
    const DatasetConfig& d = cfg.dataset;
    if (d.kind == DatasetConfig::Kind::synthetic) {
        train = gen_synthetic(d.classes, d.train_n, d.noise, cfg.seed);
        eval = gen_synthetic(d.classes, d.eval_n, d.noise, cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    } else {
        namespace fs = std::filesystem;
        train = DatasetHandle{};
        bool any = false;
        for (int i = 1; i <= 5; ++i) {
            const std::string file = d.path + "/data_batch_" + std::to_string(i) + ".bin";
            if (!fs::exists(file)) continue;
            DatasetHandle part = load_cifar10(file);
            if (!any) {
                train = std::move(part);
                any = true;
            } else {
                train.samples.insert(train.samples.end(), part.samples.begin(),
                                     part.samples.end());
            }
        }
        if (!any) throw IoError("dataset: no data_batch_*.bin under '" + d.path + "'");
        eval = load_cifar10(d.path + "/test_batch.bin");
    }
    train.mean = d.mean;
    train.stdev = d.stdev;
    eval.mean = d.mean;
    eval.stdev = d.stdev;
}

// ---- evaluation ----

namespace {

int argmax_class(const Tensor4& logits, int row) {
    const int k = logits.shape().c;
    int best = 0;
    for (int c = 1; c < k; ++c) {
        if (logits.at(row, c, 0, 0) > logits.at(row, best, 0, 0)) best = c;
    }
    return best;
}

}  // namespace

Scalar evaluate(Network& net, const DatasetHandle& data, int batch_size) {
    if (data.samples.empty()) return 0.0;
    long long correct = 0;
    std::vector<int> indices;
    for (std::size_t start = 0; start < data.samples.size(); start += batch_size) {
        indices.clear();
        const std::size_t end = std::min(data.samples.size(), start + batch_size);
        for (std::size_t i = start; i < end; ++i) indices.push_back(static_cast<int>(i));
        Tensor4 x = make_batch(data, indices);
        Tensor4 logits = net.forward(x, Mode::eval);
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (argmax_class(logits, static_cast<int>(i)) ==
                data.samples[static_cast<std::size_t>(indices[i])].label) {
                ++correct;
            }
        }
    }
    return static_cast<Scalar>(correct) / static_cast<Scalar>(data.samples.size());
}

// ---- checkpointing ----

void save_checkpoint(const std::string& path, const Network& net, const SgdOptimizer& opt,
                     const Checkpoint& meta) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    os << "ckpt 1\n";
    os << "epoch " << meta.next_epoch << "\n";
    os << "rng " << meta.rng_state << "\n";
    save_registry(os, net.registry());
    save_registry(os, opt.velocities());
    if (!os) throw IoError("checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path, Network& net, SgdOptimizer& opt) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open '" + path + "'");
    std::string tag;
    int version = 0;
    if (!(is >> tag >> version) || tag != "ckpt" || version != 1) {
        throw FormatError("checkpoint: bad header in '" + path + "'");
    }
    Checkpoint meta;
    if (!(is >> tag >> meta.next_epoch) || tag != "epoch") {
        throw FormatError("checkpoint: missing epoch");
    }
    if (!(is >> tag) || tag != "rng") throw FormatError("checkpoint: missing rng state");
    is.get();  // the separating space
    std::getline(is, meta.rng_state);
    load_registry(is, net.registry());
    load_registry(is, opt.velocities());
    return meta;
}

// ---- training loop ----

namespace {

std::string format_epoch_line(const EpochStats& s) {
    char line[128];
    std::snprintf(line, sizeof(line), "%d,%.6f,%.6f,%.6f", s.epoch, s.train_loss, s.train_acc,
                  s.eval_acc);
    return line;
}

// Names the first non-finite gradient in registry order, for the abort
// diagnostic.
std::string first_non_finite_grad(const Network& net) {
    for (const auto& e : net.registry().entries()) {
        if (!e.trainable) continue;
        for (Scalar g : e.tensor.grad()) {
            if (!std::isfinite(g)) return e.name;
        }
    }
    return "(none)";
}

}  // namespace

TrainResult train_model(const TrainConfig& cfg, const std::string& out_dir, bool resume,
                        int stop_after) {
    namespace fs = std::filesystem;
    if (!out_dir.empty()) fs::create_directories(out_dir);
    const std::string ckpt_path =
        cfg.checkpoint.empty() ? "" : (out_dir.empty() ? cfg.checkpoint
                                                       : out_dir + "/" + cfg.checkpoint);

    DatasetHandle train_data, eval_data;
    load_datasets(cfg, train_data, eval_data);
    if (train_data.samples.empty()) throw ConfigError("train: empty training set");
    if (train_data.num_classes != cfg.arch.num_classes) {
        throw ConfigError("train: dataset has " + std::to_string(train_data.num_classes) +
                          " classes, arch expects " + std::to_string(cfg.arch.num_classes));
    }

    Network net = build(cfg.arch, cfg.seed);
    SgdOptimizer opt(net, cfg.optimizer);
    Rng shuffle_rng(cfg.seed ^ 0xd1b54a32d192ed03ULL);
    int start_epoch = 0;

    if (resume) {
        if (ckpt_path.empty() || !fs::exists(ckpt_path)) {
            throw ConfigError("train: resume requested but checkpoint '" + ckpt_path +
                              "' does not exist");
        }
        Checkpoint meta = load_checkpoint(ckpt_path, net, opt);
        shuffle_rng.restore_state(meta.rng_state);
        start_epoch = meta.next_epoch;
    }

    TrainResult result;
    std::ostringstream csv;
    csv << "epoch,train_loss,train_acc,eval_acc\n";

    std::vector<int> order(train_data.samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    const int last_epoch = stop_after < 0 ? cfg.epochs : std::min(cfg.epochs, stop_after);
    for (int epoch = start_epoch; epoch < last_epoch; ++epoch) {
        const Scalar lr = schedule_lr(cfg.optimizer, epoch, cfg.epochs);
        // Identity before every shuffle: the epoch's order is then a pure
        // function of the rng state, which the checkpoint carries.
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        shuffle_rng.shuffle(order);

        Scalar loss_sum = 0;
        long long seen = 0, correct = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::span<const int> idx(order.data() + start, end - start);
            Tensor4 x = make_batch(train_data, idx);
            std::vector<int> labels = batch_labels(train_data, idx);

            Tape tape;
            Scalar batch_loss = 0;
            {
                TapeScope scope(tape);
                Tensor4 logits = net.forward(x, Mode::train);
                Tensor4 loss = cross_entropy_mean(logits, labels);
                batch_loss = loss.scalar_value();
                opt.zero_grad();
                tape.backward(loss);
                for (std::size_t i = 0; i < idx.size(); ++i) {
                    if (argmax_class(logits, static_cast<int>(i)) == labels[i]) ++correct;
                }
            }
            if (!std::isfinite(batch_loss)) {
                throw Error("train: non-finite loss at epoch " + std::to_string(epoch) +
                            "; first non-finite parameter gradient: " +
                            first_non_finite_grad(net));
            }
            opt.step(lr);
            loss_sum += batch_loss * static_cast<Scalar>(idx.size());
            seen += static_cast<long long>(idx.size());
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = loss_sum / static_cast<Scalar>(seen);
        stats.train_acc = static_cast<Scalar>(correct) / static_cast<Scalar>(seen);
        stats.eval_acc = evaluate(net, eval_data, cfg.batch_size);
        result.epochs.push_back(stats);
        csv << format_epoch_line(stats) << "\n";

        if (!ckpt_path.empty()) {
            Checkpoint meta;
            meta.next_epoch = epoch + 1;
            meta.rng_state = shuffle_rng.save_state();
            save_checkpoint(ckpt_path, net, opt, meta);
        }
    }

    result.metrics_csv = csv.str();
    result.checkpoint_path = ckpt_path;
    if (!out_dir.empty()) {
        std::ofstream mf(out_dir + "/metrics.csv", std::ios::binary);
        if (!mf) throw IoError("train: cannot write metrics.csv under '" + out_dir + "'");
        mf << result.metrics_csv;
    }
    return result;
}

// ---- ablation ----

std::vector<AblationRow> ablate(const TrainConfig& cfg, const std::string& out_dir) {
    struct Variant {
        const char* name;
        AttentionKind kind;
        bool channel;
        bool spatial;
        int gates;
    };
    const Variant variants[] = {
        {"baseline", AttentionKind::none, false, false, 0},
        {"channel-off", AttentionKind::triplet, false, true, 1},
        {"spatial-off", AttentionKind::triplet, true, false, 2},
        {"full", AttentionKind::triplet, true, true, 3},
    };

    std::vector<AblationRow> rows;
    for (const Variant& v : variants) {
        TrainConfig vcfg = cfg;
        vcfg.arch.attention.kind = v.kind;
        vcfg.arch.attention.channel_branches_enabled = v.channel;
        vcfg.arch.attention.spatial_branch_enabled = v.spatial;
        vcfg.checkpoint = "";  // the table, not the weights, is the artifact

        const std::string vdir = out_dir.empty() ? "" : out_dir + "/" + v.name;
        TrainResult res = train_model(vcfg, vdir);

        Network net = build(vcfg.arch, vcfg.seed);
        AblationRow row;
        row.variant = v.name;
        row.total_params = net.registry().trainable_count();
        long long att = 0;
        for (const Block& b : net.blocks()) att += b.attention.total_params();
        row.attention_params = att;
        row.gates_per_module = v.gates;
        row.macs = estimate_macs(net, vcfg.arch.in_channels, vcfg.arch.in_height,
                                 vcfg.arch.in_width);
        row.final_train_acc = res.epochs.back().train_acc;
        row.final_eval_acc = res.epochs.back().eval_acc;
        rows.push_back(row);
    }

    if (!out_dir.empty()) {
        std::ofstream os(out_dir + "/ablation.csv", std::ios::binary);
        if (!os) throw IoError("ablate: cannot write under '" + out_dir + "'");
        os << ablation_csv(rows);
    }
    return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "variant,params,attention_params,gates_per_module,macs,train_acc,eval_acc\n";
    for (const auto& r : rows) {
        char line[192];
        std::snprintf(line, sizeof(line), "%s,%lld,%lld,%d,%lld,%.6f,%.6f\n", r.variant.c_str(),
                      r.total_params, r.attention_params, r.gates_per_module, r.macs,
                      r.final_train_acc, r.final_eval_acc);
        os << line;
    }
    return os.str();
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    char line[192];
    std::snprintf(line, sizeof(line), "%-12s %12s %10s %7s %14s %10s %10s\n", "variant", "params",
                  "att-params", "gates", "macs", "train-acc", "eval-acc");
    os << line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof(line), "%-12s %12lld %10lld %7d %14lld %10.4f %10.4f\n",
                      r.variant.c_str(), r.total_params, r.attention_params, r.gates_per_module,
                      r.macs, r.final_train_acc, r.final_eval_acc);
        os << line;
    }
    return os.str();
}

}  // namespace attnkit
