#include "doamo/model_io.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace doamo::detector {

namespace {

constexpr double kFormat = 1.0;

class Reader {
 public:
  explicit Reader(const Tensor& t) : t_(t) {}
  double real() {
    if (pos_ >= t_.numel()) throw std::runtime_error("checkpoint meta.model is truncated");
    return t_[pos_++];
  }
  int integer() {
    const double v = real();
    if (v != std::floor(v) || std::abs(v) > 1e9) {
      throw std::runtime_error("checkpoint meta.model holds a non-integer where one is expected");
    }
    return static_cast<int>(v);
  }
  std::size_t count() {
    const int n = integer();
    if (n < 0) throw std::runtime_error("checkpoint meta.model has a negative length");
    return static_cast<std::size_t>(n);
  }
  bool done() const { return pos_ == t_.numel(); }

 private:
  const Tensor& t_;
  std::size_t pos_ = 0;
};

std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(item, &used);
      if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw std::runtime_error("key '" + key + "' expects a comma-separated integer list, got '" +
                               text + "'");
    }
  }
  if (out.empty()) throw std::runtime_error("key '" + key + "' is empty");
  return out;
}

}  // namespace

Tensor encode_config(const DetectorConfig& c) {
  std::vector<double> v = {kFormat, double(c.in_channels), double(c.num_classes),
                           double(c.image_size), c.use_doam ? 1.0 : 0.0};
  v.push_back(double(c.widths.size()));
  for (int w : c.widths) v.push_back(w);
  v.push_back(double(c.heads.size()));
  for (const HeadSpec& h : c.heads) {
    v.push_back(h.stride);
    v.push_back(h.scale);
  }
  v.push_back(double(c.aspect_ratios.size()));
  for (double r : c.aspect_ratios) v.push_back(r);
  v.insert(v.end(), {double(c.doam.eg_blocks), double(c.doam.ma_blocks), double(c.doam.eg_channels),
                     double(c.doam.ma_channels), c.doam.use_norm ? 1.0 : 0.0});
  v.push_back(double(c.doam.scales.size()));
  for (int k : c.doam.scales) v.push_back(k);
  const int n = static_cast<int>(v.size());
  return Tensor({n}, std::move(v));
}

DetectorConfig decode_config(const Tensor& meta) {
  Reader r(meta);
  if (r.real() != kFormat) throw std::runtime_error("unsupported checkpoint meta.model format");
  DetectorConfig c;
  c.in_channels = r.integer();
  c.num_classes = r.integer();
  c.image_size = r.integer();
  c.use_doam = r.integer() != 0;
  c.widths.resize(r.count());
  for (int& w : c.widths) w = r.integer();
  c.heads.resize(r.count());
  for (HeadSpec& h : c.heads) {
    h.stride = r.integer();
    h.scale = r.real();
  }
  c.aspect_ratios.resize(r.count());
  for (double& a : c.aspect_ratios) a = r.real();
  c.doam.eg_blocks = r.integer();
  c.doam.ma_blocks = r.integer();
  c.doam.eg_channels = r.integer();
  c.doam.ma_channels = r.integer();
  c.doam.use_norm = r.integer() != 0;
  c.doam.scales.resize(r.count());
  for (int& k : c.doam.scales) k = r.integer();
  if (!r.done()) throw std::runtime_error("checkpoint meta.model has trailing values");
  c.doam.in_channels = c.in_channels;
  c.validate();
  return c;
}

ArrayArchive to_archive(const Detector& model) {
  ArrayArchive a = model.store().state();
  a[kMetaKey] = encode_config(model.config());
  return a;
}

Detector from_archive(const ArrayArchive& archive) {
  auto it = archive.find(kMetaKey);
  if (it == archive.end()) throw std::runtime_error("checkpoint has no meta.model entry");
  Detector model(decode_config(it->second), 0);
  ArrayArchive state = archive;
  state.erase(kMetaKey);
  model.store().load_state(state);
  return model;
}

void save_checkpoint(const std::filesystem::path& path, const Detector& model) {
  save_archive(path, to_archive(model));
}

Detector load_checkpoint(const std::filesystem::path& path) {
  return from_archive(load_archive(path));
}

const std::set<std::string>& model_keys() {
  static const std::set<std::string> k = {"use_doam",         "image_size",
                                          "widths",           "doam_eg_blocks",
                                          "doam_ma_blocks",   "doam_eg_channels",
                                          "doam_ma_channels", "doam_scales"};
  return k;
}

void apply_model_keys(DetectorConfig& c, const KeyValues& kv) {
  c.use_doam = kv.get_bool("use_doam", c.use_doam);
  c.image_size = static_cast<int>(kv.get_int("image_size", c.image_size));
  if (kv.has("widths")) c.widths = parse_int_list("widths", kv.get_string("widths", ""));
  c.doam.eg_blocks = static_cast<int>(kv.get_int("doam_eg_blocks", c.doam.eg_blocks));
  c.doam.ma_blocks = static_cast<int>(kv.get_int("doam_ma_blocks", c.doam.ma_blocks));
  c.doam.eg_channels = static_cast<int>(kv.get_int("doam_eg_channels", c.doam.eg_channels));
  c.doam.ma_channels = static_cast<int>(kv.get_int("doam_ma_channels", c.doam.ma_channels));
  if (kv.has("doam_scales")) c.doam.scales = parse_int_list("doam_scales", kv.get_string("doam_scales", ""));
  c.doam.in_channels = c.in_channels;
  c.validate();
}

}  // namespace doamo::detector
