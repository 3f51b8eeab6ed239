#include "doamo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "doamo/image_io.hpp"

namespace doamo::train {

Strategy parse_strategy(const std::string& name) {
  if (name == "none") return Strategy::kNone;
  if (name == "hard") return Strategy::kHard;
  if (name == "easy") return Strategy::kEasy;
  if (name == "random") return Strategy::kRandom;
  if (name == "focal") return Strategy::kFocal;
  throw std::invalid_argument("unknown strategy '" + name + "' (hard, easy, random, focal, none)");
}

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kHard: return "hard";
    case Strategy::kEasy: return "easy";
    case Strategy::kRandom: return "random";
    case Strategy::kFocal: return "focal";
    default: return "none";
  }
}

double batch_loss(std::span<const detector::LossPair> losses) {
  if (losses.empty()) throw std::invalid_argument("batch_loss: empty batch");
  double s = 0.0;
  for (const auto& l : losses) s += l.loc + l.conf;
  return s / static_cast<double>(losses.size());
}

HardSamplePool::HardSamplePool(std::size_t capacity, Mode mode) : capacity_(capacity), mode_(mode) {
  if (capacity == 0) throw std::invalid_argument("pool capacity N_S must be >= 1");
}

bool HardSamplePool::offer(std::int64_t batch_id, std::vector<std::size_t> samples, double loss,
                           double threshold) {
  const std::int64_t arrival = arrivals_++;
  const bool hard = mode_ == Mode::kHard;
  const bool admissible = hard ? loss > threshold : loss < threshold;
  if (!admissible) return false;
  PoolEntry e{batch_id, std::move(samples), loss, arrival};
  if (!full()) {
    entries_.push_back(std::move(e));
    return true;
  }
  // The weakest entry: minimum loss (hard) or maximum loss (easy), latest
  // arrival among equals.
  std::size_t worst = 0;
  for (std::size_t i = 1; i < entries_.size(); ++i) {
    const double a = entries_[i].loss, b = entries_[worst].loss;
    const bool weaker = hard ? a < b : a > b;
    if (weaker || (a == b && entries_[i].arrival > entries_[worst].arrival)) worst = i;
  }
  const bool better = hard ? loss > entries_[worst].loss : loss < entries_[worst].loss;
  if (!better) return false;
  entries_.erase(entries_.begin() + static_cast<std::ptrdiff_t>(worst));
  entries_.push_back(std::move(e));
  return true;
}

void HardSamplePool::clear() {
  entries_.clear();
  arrivals_ = 0;
}

bool pool_update_hard(HardSamplePool& pool, std::int64_t batch_id,
                      std::vector<std::size_t> samples, double loss, double threshold) {
  if (pool.mode() != HardSamplePool::Mode::kHard) {
    throw std::invalid_argument("pool_update_hard on an easy-mode pool");
  }
  return pool.offer(batch_id, std::move(samples), loss, threshold);
}

bool pool_update_easy(HardSamplePool& pool, std::int64_t batch_id,
                      std::vector<std::size_t> samples, double loss, double threshold) {
  if (pool.mode() != HardSamplePool::Mode::kEasy) {
    throw std::invalid_argument("pool_update_easy on a hard-mode pool");
  }
  return pool.offer(batch_id, std::move(samples), loss, threshold);
}

std::vector<std::size_t> pool_fill_random(std::size_t num_batches, std::size_t capacity,
                                          std::uint64_t seed) {
  if (capacity == 0) throw std::invalid_argument("pool capacity N_S must be >= 1");
  std::vector<std::size_t> ids(num_batches);
  std::iota(ids.begin(), ids.end(), 0);
  std::mt19937_64 rng(seed);
  const std::size_t k = std::min(capacity, num_batches);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, num_batches - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(k);
  return ids;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (pool_capacity < 1) throw std::invalid_argument("pool_capacity must be >= 1");
  if (!(focal_gamma >= 0)) throw std::invalid_argument("focal_gamma must be >= 0");
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (!(sgd.learning_rate > 0)) throw std::invalid_argument("learning_rate must be > 0");
  if (sgd.momentum < 0 || sgd.momentum >= 1) throw std::invalid_argument("momentum must be in [0,1)");
  if (sgd.weight_decay < 0) throw std::invalid_argument("weight_decay must be >= 0");
  if (threshold && std::isnan(*threshold)) throw std::invalid_argument("threshold is NaN");
}

const std::set<std::string>& TrainConfig::keys() {
  static const std::set<std::string> k = {"strategy", "threshold",    "pool_capacity",
                                          "batch_size", "focal_gamma", "learning_rate",
                                          "momentum",   "weight_decay", "epochs",
                                          "seed",       "shuffle"};
  return k;
}

void TrainConfig::apply(const KeyValues& kv) {
  if (kv.has("strategy")) strategy = parse_strategy(kv.get_string("strategy", ""));
  if (kv.has("threshold")) {
    if (kv.get_string("threshold", "") == "auto") {
      threshold.reset();
    } else {
      threshold = kv.get_double("threshold", 0.0);
    }
  }
  const std::int64_t cap = kv.get_int("pool_capacity", static_cast<std::int64_t>(pool_capacity));
  if (cap < 1) throw std::invalid_argument("pool_capacity must be >= 1");
  pool_capacity = static_cast<std::size_t>(cap);
  batch_size = static_cast<int>(kv.get_int("batch_size", batch_size));
  focal_gamma = kv.get_double("focal_gamma", focal_gamma);
  sgd.learning_rate = kv.get_double("learning_rate", sgd.learning_rate);
  sgd.momentum = kv.get_double("momentum", sgd.momentum);
  sgd.weight_decay = kv.get_double("weight_decay", sgd.weight_decay);
  epochs = static_cast<int>(kv.get_int("epochs", epochs));
  seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<std::int64_t>(seed)));
  shuffle = kv.get_bool("shuffle", shuffle);
  validate();
}

TrainingSet make_training_set(const data::Dataset& ds, int image_size) {
  TrainingSet set;
  for (const data::ImageRecord& r : ds.records) {
    Tensor img = to_tensor(read_image(r.image_path));
    if (img.dim(0) == 1) {
      Tensor rgb({3, img.dim(1), img.dim(2)});
      for (int c = 0; c < 3; ++c) {
        std::copy(img.storage().begin(), img.storage().end(),
                  rgb.storage().begin() + static_cast<std::ptrdiff_t>(c) * img.numel());
      }
      img = std::move(rgb);
    }
    set.images.push_back(resize_bilinear(img, image_size, image_size));
    std::vector<detector::Target> ts;
    for (const data::Annotation& a : r.annotations) {
      const int label = ds.class_index(a.category);
      if (label < 0) throw std::runtime_error("unknown category " + a.category);
      ts.push_back({label,
                    {a.box.x1 / r.width, a.box.y1 / r.height, a.box.x2 / r.width,
                     a.box.y2 / r.height}});
    }
    set.targets.push_back(std::move(ts));
  }
  return set;
}

Tensor make_batch(const TrainingSet& set, std::span<const std::size_t> indices) {
  std::vector<Tensor> items;
  items.reserve(indices.size());
  for (std::size_t i : indices) items.push_back(set.images.at(i));
  return stack(items);
}

nlohmann::json BatchRecord::to_json() const {
  return {{"epoch", epoch},   {"batch_id", batch_id}, {"L_i", loss},
          {"pooled", pooled}, {"replayed", replayed}};
}

double EpochReport::mean_batch_loss() const {
  if (batch_losses.empty()) return 0.0;
  return std::accumulate(batch_losses.begin(), batch_losses.end(), 0.0) /
         static_cast<double>(batch_losses.size());
}

void EpochReport::write_jsonl(std::ostream& out) const {
  for (const BatchRecord& r : records) out << r.to_json().dump() << "\n";
}

Trainer::Trainer(detector::Detector& model, const TrainingSet& data, TrainConfig config)
    : model_(model), data_(data), config_(std::move(config)), optimizer_(config_.sgd) {
  config_.validate();
  if (data_.size() == 0) throw std::invalid_argument("trainer: empty training set");
}

std::vector<std::vector<std::size_t>> Trainer::make_batches() {
  std::vector<std::size_t> order(data_.size());
  std::iota(order.begin(), order.end(), 0);
  if (config_.shuffle) {
    std::mt19937_64 rng(config_.seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(epoch_) + 1);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += config_.batch_size) {
    const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(config_.batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

double Trainer::step(std::span<const std::size_t> samples, int epoch, std::int64_t batch_id) {
  Var x = constant(make_batch(data_, samples));
  detector::DetectorOutput out = model_.forward(x, true);
  std::vector<std::vector<detector::Target>> targets;
  for (std::size_t i : samples) targets.push_back(data_.targets[i]);
  detector::LossOptions opt;
  if (config_.strategy == Strategy::kFocal) opt.focal_gamma = config_.focal_gamma;
  detector::BatchLoss loss = detector::detection_loss(out, model_.anchors(), targets, opt);
  const double value = batch_loss(loss.per_image);
  if (!std::isfinite(value)) {
    std::ostringstream msg;
    msg << "non-finite batch loss " << value << " at epoch " << epoch << " batch " << batch_id;
    throw std::runtime_error(msg.str());
  }
  backward(loss.total);
  optimizer_.step(model_.store());
  return value;
}

EpochReport Trainer::train_epoch() {
  EpochReport rep;
  rep.epoch = epoch_;
  const auto batches = make_batches();
  const bool threshold_pool =
      config_.strategy == Strategy::kHard || config_.strategy == Strategy::kEasy;
  std::optional<double> threshold = config_.threshold ? config_.threshold : previous_mean_;
  const bool pool_active = threshold_pool && threshold.has_value();
  const auto mode = config_.strategy == Strategy::kEasy ? HardSamplePool::Mode::kEasy
                                                        : HardSamplePool::Mode::kHard;
  rep.threshold = threshold.value_or(mode == HardSamplePool::Mode::kHard
                                         ? std::numeric_limits<double>::infinity()
                                         : -std::numeric_limits<double>::infinity());
  HardSamplePool pool(config_.pool_capacity, mode);
  const std::int64_t steps_before = optimizer_.steps();

  for (std::size_t b = 0; b < batches.size(); ++b) {
    const auto id = static_cast<std::int64_t>(b);
    const double loss = step(batches[b], epoch_, id);
    bool pooled = false;
    if (pool_active) pooled = pool.offer(id, batches[b], loss, *threshold);
    rep.batch_losses.push_back(loss);
    rep.records.push_back({epoch_, id, loss, pooled, false});
    std::vector<std::int64_t> ids;
    for (const PoolEntry& e : pool.entries()) ids.push_back(e.batch_id);
    rep.pool_history.push_back(std::move(ids));
  }

  if (config_.strategy == Strategy::kRandom) {
    const std::uint64_t seed = config_.seed ^ (0xD1B54A32D192ED03ull * (static_cast<std::uint64_t>(epoch_) + 1));
    for (std::size_t b : pool_fill_random(batches.size(), config_.pool_capacity, seed)) {
      pool.offer(static_cast<std::int64_t>(b), batches[b], rep.batch_losses[b],
                 -std::numeric_limits<double>::infinity());
      rep.records[b].pooled = true;
    }
  }

  // Replay with the pool frozen: replay losses are recorded, not offered.
  for (const PoolEntry& e : pool.entries()) {
    const double loss = step(e.samples, epoch_, e.batch_id);
    rep.replay_losses.push_back(loss);
    rep.records.push_back({epoch_, e.batch_id, loss, true, true});
  }
  pool.clear();

  rep.optimizer_steps = optimizer_.steps() - steps_before;
  previous_mean_ = rep.mean_batch_loss();
  ++epoch_;
  return rep;
}

}  // namespace doamo::train
