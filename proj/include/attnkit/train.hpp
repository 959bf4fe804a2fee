#pragma once

#include <optional>
#include <string>
#include <vector>

#include "attnkit/backbone.hpp"
#include "attnkit/data.hpp"

namespace attnkit {

struct OptimizerConfig {
    Scalar learning_rate = 0.1;
    Scalar momentum = 0.9;
    Scalar weight_decay = 5e-4;
};

struct DatasetConfig {
    enum class Kind { synthetic, cifar10_binary };
    Kind kind = Kind::synthetic;
    // synthetic
    int classes = 2;
    int train_n = 64;
    int eval_n = 32;
    Scalar noise = 0.0;
    // cifar10-binary: directory holding data_batch_*.bin and test_batch.bin
    std::string path;
    std::vector<Scalar> mean;  // optional per-channel stats
    std::vector<Scalar> stdev;
};

struct TrainConfig {
    ArchSpec arch;
    OptimizerConfig optimizer;
    int epochs = 10;
    int batch_size = 8;  // >= 2 (batchnorm train mode)
    std::uint64_t seed = 1;
    DatasetConfig dataset;
    std::string checkpoint = "checkpoint.bin";  // written under the out dir
};

TrainConfig train_config_from_json_text(const std::string& text);
TrainConfig train_config_from_json_file(const std::string& path);

struct EpochStats {
    int epoch = 0;
    Scalar train_loss = 0;
    Scalar train_acc = 0;
    Scalar eval_acc = 0;
};

struct TrainResult {
    std::vector<EpochStats> epochs;
    std::string metrics_csv;      // header "epoch,train_loss,train_acc,eval_acc"
    std::string checkpoint_path;  // empty when checkpointing is disabled
};

// SGD with momentum and decoupled step-decay schedule: the learning rate
// drops by 10x at 50% and 75% of the configured epochs.
class SgdOptimizer {
public:
    SgdOptimizer(Network& net, OptimizerConfig cfg);
    void step(Scalar learning_rate);
    void zero_grad();
    ParamRegistry& velocities() { return velocities_; }
    const ParamRegistry& velocities() const { return velocities_; }

private:
    Network* net_;
    OptimizerConfig cfg_;
    ParamRegistry velocities_;  // one buffer per trainable parameter
};

Scalar schedule_lr(const OptimizerConfig& cfg, int epoch, int total_epochs);

// Loads the dataset pair named by the config.
void load_datasets(const TrainConfig& cfg, DatasetHandle& train, DatasetHandle& eval);

// Top-1 accuracy over a dataset in eval mode.
Scalar evaluate(Network& net, const DatasetHandle& data, int batch_size);

// Deterministic training. Writes metrics.csv and the checkpoint into
// out_dir; with resume=true it continues from the existing checkpoint and
// the metrics file holds only the newly run epochs. stop_after interrupts
// the run once that many epochs are complete (the schedule still follows
// cfg.epochs), so a resumed run is bitwise-continuous with a straight one.
// Aborts on non-finite loss, naming the first non-finite parameter
// gradient.
TrainResult train_model(const TrainConfig& cfg, const std::string& out_dir, bool resume = false,
                        int stop_after = -1);

struct AblationRow {
    std::string variant;
    long long total_params = 0;
    long long attention_params = 0;  // with batchnorm affine
    int gates_per_module = 0;
    long long macs = 0;
    Scalar final_train_acc = 0;
    Scalar final_eval_acc = 0;
};

// Trains four variants under identical seeds and schedules: no attention,
// triplet channel-off, triplet spatial-off, triplet full.
std::vector<AblationRow> ablate(const TrainConfig& cfg, const std::string& out_dir);

std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string ablation_table(const std::vector<AblationRow>& rows);

// ---- checkpointing ----

struct Checkpoint {
    int next_epoch = 0;
    std::string rng_state;
};

void save_checkpoint(const std::string& path, const Network& net, const SgdOptimizer& opt,
                     const Checkpoint& meta);
Checkpoint load_checkpoint(const std::string& path, Network& net, SgdOptimizer& opt);

}  // namespace attnkit
