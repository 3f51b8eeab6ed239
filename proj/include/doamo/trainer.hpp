#ifndef DOAMO_TRAINER_HPP_
#define DOAMO_TRAINER_HPP_

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "doamo/config.hpp"
#include "doamo/dataset.hpp"
#include "doamo/detector.hpp"
#include "doamo/nn.hpp"

namespace doamo::train {

enum class Strategy { kNone, kHard, kEasy, kRandom, kFocal };

Strategy parse_strategy(const std::string& name);  // none|hard|easy|random|focal
std::string strategy_name(Strategy s);

// (sum of loc + conf) / n over the batch's per-sample losses.
double batch_loss(std::span<const detector::LossPair> losses);

struct PoolEntry {
  std::int64_t batch_id = 0;
  std::vector<std::size_t> samples;
  double loss = 0.0;
  std::int64_t arrival = 0;  // offer order within the current fill
};

// Bounded record of batches. Hard mode keeps the largest admissible losses
// (admissible: loss > threshold), easy mode the smallest (loss <
// threshold). Inequalities are strict; among equal losses the earlier
// arrival is kept. Entries stay in arrival order.
class HardSamplePool {
 public:
  enum class Mode { kHard, kEasy };

  HardSamplePool(std::size_t capacity, Mode mode);

  // Returns true when the batch entered the pool.
  bool offer(std::int64_t batch_id, std::vector<std::size_t> samples, double loss,
             double threshold);
  void clear();

  const std::vector<PoolEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool full() const { return entries_.size() >= capacity_; }
  Mode mode() const { return mode_; }

 private:
  std::size_t capacity_;
  Mode mode_;
  std::vector<PoolEntry> entries_;
  std::int64_t arrivals_ = 0;
};

bool pool_update_hard(HardSamplePool& pool, std::int64_t batch_id,
                      std::vector<std::size_t> samples, double loss, double threshold);
bool pool_update_easy(HardSamplePool& pool, std::int64_t batch_id,
                      std::vector<std::size_t> samples, double loss, double threshold);

// min(capacity, num_batches) distinct batch indices drawn uniformly without
// replacement, in draw order.
std::vector<std::size_t> pool_fill_random(std::size_t num_batches, std::size_t capacity,
                                          std::uint64_t seed);

struct TrainConfig {
  Strategy strategy = Strategy::kNone;
  // Fixed threshold L; unset means the mean batch loss of the previous
  // epoch, with the threshold pool idle during the first epoch.
  std::optional<double> threshold;
  std::size_t pool_capacity = 5;  // N_S, in batches
  int batch_size = 24;
  double focal_gamma = 2.0;
  SgdOptions sgd;
  int epochs = 10;
  std::uint64_t seed = 0;
  bool shuffle = true;

  void validate() const;
  // Reads the trainer keys listed by keys(); others are left alone.
  void apply(const KeyValues& kv);
  static const std::set<std::string>& keys();
};

// Images resized to the detector input and boxes normalised to [0,1].
struct TrainingSet {
  std::vector<Tensor> images;  // (C, S, S)
  std::vector<std::vector<detector::Target>> targets;
  std::size_t size() const { return images.size(); }
};

TrainingSet make_training_set(const data::Dataset& ds, int image_size);
// Stacks the listed samples into an (N, C, S, S) batch.
Tensor make_batch(const TrainingSet& set, std::span<const std::size_t> indices);

struct BatchRecord {
  int epoch = 0;
  std::int64_t batch_id = 0;
  double loss = 0.0;
  bool pooled = false;    // entered the pool when it arrived
  bool replayed = false;  // this record is the replay step
  nlohmann::json to_json() const;
};

struct EpochReport {
  int epoch = 0;
  double threshold = 0.0;  // L in force; +/-inf when idle
  std::vector<BatchRecord> records;
  std::vector<double> batch_losses;
  std::vector<double> replay_losses;
  std::vector<std::vector<std::int64_t>> pool_history;  // pool ids after each batch
  std::int64_t optimizer_steps = 0;                     // steps taken this epoch

  double mean_batch_loss() const;
  std::size_t replay_count() const { return replay_losses.size(); }
  // One JSON object per line, per record.
  void write_jsonl(std::ostream& out) const;
};

class Trainer {
 public:
  Trainer(detector::Detector& model, const TrainingSet& data, TrainConfig config);

  // One pass over the data, then replay of the pooled batches; the pool is
  // cleared before returning. Throws on a non-finite loss.
  EpochReport train_epoch();

  int epoch() const { return epoch_; }
  std::int64_t steps() const { return optimizer_.steps(); }
  const TrainConfig& config() const { return config_; }

 private:
  // Forward + backward + SGD step; returns the batch loss.
  double step(std::span<const std::size_t> samples, int epoch, std::int64_t batch_id);
  std::vector<std::vector<std::size_t>> make_batches();

  detector::Detector& model_;
  const TrainingSet& data_;
  TrainConfig config_;
  Sgd optimizer_;
  int epoch_ = 0;
  std::optional<double> previous_mean_;
};

}  // namespace doamo::train

#endif  // DOAMO_TRAINER_HPP_
