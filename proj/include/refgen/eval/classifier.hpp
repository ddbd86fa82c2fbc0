#pragma once

// Small conv classifier over log-mel clips. Stands in for a pretrained audio
// tagger: class probabilities feed KL, penultimate activations feed FAD and the
// cosine scores, and per-label mean embeddings act as text embeddings.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "refgen/bank/event_bank.hpp"
#include "refgen/codec/mel.hpp"
#include "refgen/core/archive.hpp"
#include "refgen/nn/layers.hpp"
#include "refgen/nn/optim.hpp"

namespace refgen::eval {

using audio::AudioClip;

struct ClassifierConfig {
  int per_class_train = 24;
  int per_class_test = 8;
  int epochs = 30;
  int batch = 16;
  double lr = 3e-3;
  double min_accuracy = 0.90;
  int width = 16;
  int embed_dim = 64;
  std::uint64_t seed = 0;
  codec::MelParams mel;
};

inline constexpr int kPoolTime = 8;
inline constexpr int kPoolFreq = 2;

class EventClassifier {
 public:
  EventClassifier() = default;
  EventClassifier(std::vector<std::string> labels, int width, int embed_dim, const codec::MelParams& mel, std::uint64_t seed)
      : labels_(std::move(labels)), width_(width), embed_dim_(embed_dim), mel_(mel) {
    if (labels_.size() < 2) throw ValidationError("event classifier needs at least 2 labels");
    if (mel_.frames % (kPoolTime * 8) || mel_.n_mels % (kPoolFreq * 4))
      throw ValidationError("event classifier: mel grid not divisible by the pooling stack");
    Rng rng(derive_seed(seed, "classifier-init"));
    c1_ = nn::Conv2d<float>(params_, "c1", 1, width, 3, rng);
    c2_ = nn::Conv2d<float>(params_, "c2", width, 2 * width, 3, rng);
    c3_ = nn::Conv2d<float>(params_, "c3", 2 * width, 2 * width, 3, rng);
    const int f = mel_.n_mels / kPoolFreq / 4;
    emb_ = nn::Linear<float>(params_, "emb", 2 * width * f, embed_dim, rng);
    head_ = nn::Linear<float>(params_, "head", embed_dim, static_cast<int>(labels_.size()), rng);
  }

  EventClassifier(EventClassifier&&) = default;
  EventClassifier& operator=(EventClassifier&&) = default;

  const std::vector<std::string>& labels() const { return labels_; }
  int classes() const { return static_cast<int>(labels_.size()); }
  int embed_dim() const { return embed_dim_; }
  const codec::MelParams& mel_params() const { return mel_; }
  nn::ParamSet<float>& params() { return params_; }
  std::string id() const { return "event-classifier/" + std::to_string(width_) + "x" + std::to_string(embed_dim_); }

  /// Pooled log-mel input, (1, frames / 8, mels / 2).
  Tensor<float> input(const AudioClip& clip) const {
    const auto m = codec::mel_forward(clip.fitted(audio::kClipSeconds), mel_);
    const int h = mel_.frames / kPoolTime, w = mel_.n_mels / kPoolFreq;
    Tensor<float> out({1, h, w});
    for (int t = 0; t < mel_.frames; ++t)
      for (int f = 0; f < mel_.n_mels; ++f)
        out.data[(t / kPoolTime) * w + f / kPoolFreq] += m.data[t * mel_.n_mels + f] / (kPoolTime * kPoolFreq);
    return out;
  }

  /// {embedding (N, E), logits (N, classes)} for a batch of inputs (N, 1, H, W).
  std::pair<nn::Var<float>, nn::Var<float>> forward(const nn::Var<float>& x) const {
    nn::Var<float> h = nn::relu(c1_(x));
    h = nn::avg_pool(h, 2, 2);
    h = nn::relu(c2_(h));
    h = nn::avg_pool(h, 2, 2);
    h = nn::relu(c3_(h));
    nn::Var<float> e = nn::relu(emb_(nn::time_mean(h)));
    return {e, head_(e)};
  }

  struct Output {
    std::vector<double> probs, embedding;
  };

  Output analyze_input(const Tensor<float>& in) const {
    nn::NoGradGuard ng;
    auto [e, logits] = forward(nn::Var<float>(in.reshaped({1, 1, in.dim(1), in.dim(2)})));
    Output o;
    o.embedding.assign(e.value().data.begin(), e.value().data.end());
    o.probs = softmax(logits.value().data);
    return o;
  }

  Output analyze(const AudioClip& clip) const { return analyze_input(input(clip)); }
  std::vector<double> probabilities(const AudioClip& clip) const { return analyze(clip).probs; }
  std::vector<double> embedding(const AudioClip& clip) const { return analyze(clip).embedding; }

  int predict(const AudioClip& clip) const {
    const auto p = probabilities(clip);
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
  }
  const std::string& predict_label(const AudioClip& clip) const { return labels_[predict(clip)]; }

  int label_index(const std::string& label) const {
    auto it = std::find(labels_.begin(), labels_.end(), label);
    if (it == labels_.end()) throw ValidationError("classifier has no label '" + label + "'");
    return static_cast<int>(it - labels_.begin());
  }

  /// Mean training embedding per label.
  const std::vector<std::vector<double>>& prototypes() const { return prototypes_; }
  void set_prototypes(std::vector<std::vector<double>> p) { prototypes_ = std::move(p); }

  /// Mean prototype of the given labels; empty when none is known.
  std::vector<double> text_embedding(const std::vector<std::string>& labels) const {
    std::vector<double> out;
    int n = 0;
    for (const auto& l : labels) {
      auto it = std::find(labels_.begin(), labels_.end(), l);
      if (it == labels_.end() || prototypes_.empty()) continue;
      const auto& p = prototypes_[it - labels_.begin()];
      if (out.empty()) out.assign(p.size(), 0.0);
      for (std::size_t i = 0; i < p.size(); ++i) out[i] += p[i];
      ++n;
    }
    for (auto& v : out) v /= n;
    return out;
  }

  static std::vector<double> softmax(const AlignedVector<float>& logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i) s += p[i] = std::exp(logits[i] - mx);
    for (auto& v : p) v /= s;
    return p;
  }

  void store(Archive& ar) const {
    std::string l;
    for (const auto& s : labels_) l += s + '\n';
    ar.strings["clf.labels"] = l;
    ar.strings["clf.shape"] = std::to_string(width_) + ' ' + std::to_string(embed_dim_);
    std::ostringstream mp;
    mp.precision(17);
    mp << mel_.sample_rate << ' ' << mel_.n_fft << ' ' << mel_.hop << ' ' << mel_.n_mels << ' ' << mel_.frames << ' '
       << mel_.fmin << ' ' << mel_.fmax;
    ar.strings["clf.mel"] = mp.str();
    for (const auto& [name, v] : params_.items()) ar.tensors["clf." + name] = v.value();
    Tensor<float> proto({classes(), embed_dim_});
    for (int c = 0; c < classes() && !prototypes_.empty(); ++c)
      for (int j = 0; j < embed_dim_; ++j) proto.data[c * embed_dim_ + j] = static_cast<float>(prototypes_[c][j]);
    ar.tensors["clf.prototypes"] = proto;
  }

  static EventClassifier restore(const Archive& ar) {
    std::vector<std::string> labels;
    std::istringstream ls(ar.string("clf.labels"));
    for (std::string s; std::getline(ls, s);) labels.push_back(s);
    int width = 0, embed = 0;
    std::istringstream ss(ar.string("clf.shape"));
    ss >> width >> embed;
    codec::MelParams mel;
    std::istringstream ms(ar.string("clf.mel"));
    ms >> mel.sample_rate >> mel.n_fft >> mel.hop >> mel.n_mels >> mel.frames >> mel.fmin >> mel.fmax;
    if (!ss || !ms) throw IoError("malformed classifier archive");
    EventClassifier c(labels, width, embed, mel, 0);
    for (auto& [name, v] : c.params_.items()) {
      const auto& t = ar.tensor("clf." + name);
      require_same_shape(t.shape, v.shape(), ("clf." + name).c_str());
      v.mutable_value() = t;
    }
    const auto& p = ar.tensor("clf.prototypes");
    c.prototypes_.assign(c.classes(), std::vector<double>(embed));
    for (int k = 0; k < c.classes(); ++k)
      for (int j = 0; j < embed; ++j) c.prototypes_[k][j] = p.data[k * embed + j];
    return c;
  }

 private:
  std::vector<std::string> labels_;
  int width_ = 0, embed_dim_ = 0;
  codec::MelParams mel_;
  nn::ParamSet<float> params_;
  nn::Conv2d<float> c1_, c2_, c3_;
  nn::Linear<float> emb_, head_;
  std::vector<std::vector<double>> prototypes_;
};

/// 10 s clip with 1 to 3 renditions of one event at random onsets, random gain
/// and a low noise floor.
inline AudioClip classifier_sample(const bank::EventSpec& spec, Rng& rng, int rate = audio::kDefaultRate) {
  const std::size_t n = AudioClip::sample_count(audio::kClipSeconds, rate);
  std::vector<float> y(n, 0.0f);
  const int copies = 1 + static_cast<int>(rng.index(3));
  for (int c = 0; c < copies; ++c) {
    const auto ev = bank::synthesize_event(spec, rng.next(), rate);
    const double gain = rng.uniform(0.3, 1.0);
    const std::size_t len = std::min(ev.size(), n);
    const std::size_t at = rng.index(n - len + 1);
    for (std::size_t i = 0; i < len; ++i) y[at + i] += static_cast<float>(gain * ev.samples[i]);
  }
  const double noise = rng.uniform(0.0, 0.01);
  for (auto& v : y) v = std::clamp(static_cast<float>(v + noise * rng.normal()), -1.0f, 1.0f);
  return AudioClip(std::move(y), rate, spec.label);
}

struct ClassifierTrainResult {
  EventClassifier model;
  double heldout_accuracy = 0;
  std::vector<double> epoch_loss;
};

/// Trains on generated renditions of every bank event and gates on held-out
/// accuracy. Extra labelled clips (e.g. forge references) join the training set.
inline ClassifierTrainResult train_event_classifier(const std::vector<bank::EventSpec>& bank_specs, const ClassifierConfig& cfg = {},
                                                    const std::vector<AudioClip>& extra = {}) {
  if (cfg.per_class_train < 20)
    throw ValidationError("event classifier needs at least 20 training examples per event, got " + std::to_string(cfg.per_class_train));
  std::vector<std::string> labels;
  for (const auto& s : bank_specs) labels.push_back(s.label);
  ClassifierTrainResult res{EventClassifier(labels, cfg.width, cfg.embed_dim, cfg.mel, cfg.seed), 0, {}};
  auto& clf = res.model;

  Rng data_rng(derive_seed(cfg.seed, "classifier-data"));
  std::vector<Tensor<float>> train_x, test_x;
  std::vector<int> train_y, test_y;
  for (int c = 0; c < clf.classes(); ++c) {
    for (int i = 0; i < cfg.per_class_train; ++i) {
      train_x.push_back(clf.input(classifier_sample(bank_specs[c], data_rng, cfg.mel.sample_rate)));
      train_y.push_back(c);
    }
    for (int i = 0; i < cfg.per_class_test; ++i) {
      test_x.push_back(clf.input(classifier_sample(bank_specs[c], data_rng, cfg.mel.sample_rate)));
      test_y.push_back(c);
    }
  }
  for (const auto& clip : extra) {
    if (!clip.label) continue;
    train_x.push_back(clf.input(clip));
    train_y.push_back(clf.label_index(*clip.label));
  }

  nn::AdamWConfig oc;
  oc.lr = cfg.lr;
  oc.warmup_steps = 20;
  oc.weight_decay = 1e-4;
  nn::AdamW<float> opt(clf.params(), oc);
  Rng order_rng(derive_seed(cfg.seed, "classifier-order"));
  const int h = train_x[0].dim(1), w = train_x[0].dim(2);
  auto stack = [&](const std::vector<Tensor<float>>& xs, const std::vector<std::size_t>& idx) {
    Tensor<float> b({static_cast<int>(idx.size()), 1, h, w});
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy(xs[idx[i]].data.begin(), xs[idx[i]].data.end(), b.data.begin() + i * h * w);
    return b;
  };
  std::vector<std::size_t> order(train_x.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng.engine());
    double total = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch) {
      std::vector<std::size_t> idx(order.begin() + s, order.begin() + std::min(order.size(), s + cfg.batch));
      std::vector<int> y;
      for (auto i : idx) y.push_back(train_y[i]);
      clf.params().zero_grad();
      auto [e, logits] = clf.forward(nn::Var<float>(stack(train_x, idx)));
      auto loss = nn::softmax_cross_entropy(logits, y);
      nn::backward(loss);
      opt.step();
      total += loss.item() * idx.size();
    }
    res.epoch_loss.push_back(total / order.size());
  }

  int correct = 0;
  for (std::size_t i = 0; i < test_x.size(); ++i) {
    const auto p = clf.analyze_input(test_x[i]).probs;
    correct += static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()) == test_y[i];
  }
  res.heldout_accuracy = test_x.empty() ? 1.0 : static_cast<double>(correct) / test_x.size();
  if (res.heldout_accuracy < cfg.min_accuracy)
    throw TrainingError("event classifier reached " + std::to_string(res.heldout_accuracy) + " held-out accuracy, below " +
                        std::to_string(cfg.min_accuracy) + "; spread the bank timbres further apart or train longer");

  std::vector<std::vector<double>> proto(clf.classes(), std::vector<double>(clf.embed_dim(), 0.0));
  std::vector<int> counts(clf.classes(), 0);
  for (std::size_t i = 0; i < train_x.size(); ++i) {
    const auto e = clf.analyze_input(train_x[i]).embedding;
    for (int j = 0; j < clf.embed_dim(); ++j) proto[train_y[i]][j] += e[j];
    ++counts[train_y[i]];
  }
  for (int c = 0; c < clf.classes(); ++c)
    for (auto& v : proto[c]) v /= std::max(1, counts[c]);
  clf.set_prototypes(std::move(proto));
  return res;
}

}  // namespace refgen::eval
