#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "flowxpert/cluster.hpp"
#include "flowxpert/error.hpp"
#include "flowxpert/flow.hpp"
#include "flowxpert/neural.hpp"
#include "flowxpert/preprocess.hpp"
#include "flowxpert/types.hpp"

namespace flowxpert {

using json = nlohmann::json;

struct EmbedTrainConfig {
  std::size_t epochs = 150;
  std::size_t batch_size = 256;  // anchors per batch; each contributes one positive and one negative pair
  double learning_rate = 1e-3;
  double margin = 1.0;
  std::uint64_t seed = 7;
  double downsample_rate = 0.02;
  nn::OptimizerKind optimizer = nn::OptimizerKind::adam;
};

struct DetectorTrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 512;
  double learning_rate = 1e-3;
  std::uint64_t seed = 7;
  nn::OptimizerKind optimizer = nn::OptimizerKind::adam;
};

// Columns of a features x n matrix, one per vector.
inline nn::Matrix<float> to_matrix(std::span<const FeatureVector> vectors) {
  nn::Matrix<float> m(static_cast<nn::Index>(kInputDim), static_cast<nn::Index>(vectors.size()));
  for (std::size_t j = 0; j < vectors.size(); ++j) {
    for (std::size_t i = 0; i < kInputDim; ++i) m(static_cast<nn::Index>(i), static_cast<nn::Index>(j)) = vectors[j][i];
  }
  return m;
}

inline nn::Matrix<float> gather_columns(const nn::Matrix<float>& m, std::span<const std::size_t> idx) {
  nn::Matrix<float> out(m.rows(), static_cast<nn::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out.col(static_cast<nn::Index>(j)) = m.col(static_cast<nn::Index>(idx[j]));
  return out;
}

// ---------------------------------------------------------------------------
// Contrastive embedding training
// ---------------------------------------------------------------------------

struct EmbedTrainResult {
  nn::EmbeddingNet<float> net;
  std::vector<double> epoch_loss;
};

// Trains the embedding on cluster pseudo-labels. Noise samples take no part.
// Each epoch visits every non-noise sample once as an anchor, pairing it with
// one random same-cluster sample and one random other-cluster sample; anchors
// in singleton clusters are skipped.
inline EmbedTrainResult train_embedding(const nn::Matrix<float>& x, std::span<const int> cluster_ids,
                                        const EmbedTrainConfig& cfg) {
  if (static_cast<std::size_t>(x.cols()) != cluster_ids.size()) {
    throw ShapeMismatch("train_embedding: cluster ids do not match sample count");
  }
  if (cfg.epochs < 1 || !(cfg.margin > 0.0) || cfg.batch_size < 1) {
    throw UsageError("train_embedding: epochs and batch size must be >= 1 and margin > 0");
  }
  std::map<int, std::vector<std::size_t>> members;
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < cluster_ids.size(); ++i) {
    if (cluster_ids[i] == kNoise) continue;
    members[cluster_ids[i]].push_back(i);
    pool.push_back(i);
  }
  if (members.size() < 2) {
    throw InsufficientClusters("need at least 2 non-noise clusters, got " + std::to_string(members.size()));
  }

  EmbedTrainResult res{nn::EmbeddingNet<float>(x.rows()), {}};
  auto& net = res.net;
  std::mt19937_64 rng(cfg.seed);
  net.init(rng);
  auto params = net.parameters();
  nn::Optimizer<float> opt(cfg.optimizer, cfg.learning_rate);
  const float margin = static_cast<float>(cfg.margin);

  struct Triple {
    std::size_t anchor, positive, negative;
  };
  std::vector<std::size_t> order = pool;
  std::vector<Triple> triples;
  std::vector<nn::EmbeddingPair> pairs;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    triples.clear();
    for (std::size_t a : order) {
      const auto& same = members[cluster_ids[a]];
      if (same.size() < 2) continue;
      std::uniform_int_distribution<std::size_t> pick_same(0, same.size() - 2);
      std::size_t p = same[pick_same(rng)];
      if (p == a) p = same.back();
      std::uniform_int_distribution<std::size_t> pick_any(0, pool.size() - 1);
      std::size_t n = pool[pick_any(rng)];
      while (cluster_ids[n] == cluster_ids[a]) n = pool[pick_any(rng)];
      triples.push_back({a, p, n});
    }

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < triples.size(); start += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, triples.size() - start);
      nn::Matrix<float> batch(x.rows(), static_cast<nn::Index>(3 * b));
      pairs.clear();
      for (std::size_t k = 0; k < b; ++k) {
        const auto& t = triples[start + k];
        const auto ik = static_cast<nn::Index>(k);
        const auto ib = static_cast<nn::Index>(b);
        batch.col(ik) = x.col(static_cast<nn::Index>(t.anchor));
        batch.col(ib + ik) = x.col(static_cast<nn::Index>(t.positive));
        batch.col(2 * ib + ik) = x.col(static_cast<nn::Index>(t.negative));
        pairs.push_back({ik, ib + ik, PairLabel::same});
        pairs.push_back({ik, 2 * ib + ik, PairLabel::different});
      }
      const auto emb = net.forward(batch, nn::Mode::train);
      const auto loss = nn::contrastive_loss<float>(emb, pairs, margin);
      net.backward(loss.grad);
      opt.step(params);
      loss_sum += static_cast<double>(loss.loss) * static_cast<double>(b);
    }
    res.epoch_loss.push_back(triples.empty() ? 0.0 : loss_sum / static_cast<double>(triples.size()));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Detector training
// ---------------------------------------------------------------------------

struct DetectorTrainResult {
  nn::EncoderNet<float> encoder;
  nn::ClassifierHead<float> head;
  std::vector<double> epoch_loss;
};

// Cross-entropy training of encoder + head on [x; embedding(x)]. The embedding
// is taken by const reference and evaluated once in eval mode, so it cannot change.
inline DetectorTrainResult train_detector(const nn::Matrix<float>& x, std::span<const TrafficClass> labels,
                                          const nn::EmbeddingNet<float>& embedding, const DetectorTrainConfig& cfg) {
  if (static_cast<std::size_t>(x.cols()) != labels.size()) {
    throw ShapeMismatch("train_detector: label count does not match sample count");
  }
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw UsageError("train_detector: epochs and batch size must be >= 1");
  const auto n_mal = std::count(labels.begin(), labels.end(), TrafficClass::malicious);
  if (n_mal == 0 || n_mal == static_cast<std::ptrdiff_t>(labels.size())) {
    throw SingleClassDataset("detector training needs both benign and malicious samples");
  }

  const nn::Matrix<float> fused = nn::concat_with_embedding(x, embedding);
  DetectorTrainResult res{nn::EncoderNet<float>(fused.rows()), nn::ClassifierHead<float>(), {}};
  std::mt19937_64 rng(cfg.seed);
  res.encoder.init(rng);
  res.head.init(rng);
  auto params = res.encoder.parameters();
  auto head_params = res.head.parameters();
  params.insert(params.end(), head_params.begin(), head_params.end());
  nn::Optimizer<float> opt(cfg.optimizer, cfg.learning_rate);

  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> y;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, order.size() - start);
      std::span<const std::size_t> idx(order.data() + start, b);
      const auto batch = gather_columns(fused, idx);
      y.resize(b);
      for (std::size_t k = 0; k < b; ++k) y[k] = static_cast<int>(labels[idx[k]]);
      const auto logits = res.head.forward(res.encoder.forward(batch));
      const auto loss = nn::cross_entropy_loss<float>(logits, y);
      res.encoder.backward(res.head.backward(loss.grad));
      opt.step(params);
      loss_sum += static_cast<double>(loss.loss) * static_cast<double>(b);
    }
    res.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Model bundle
// ---------------------------------------------------------------------------

struct ModelBundle {
  Scaler scaler;
  nn::EmbeddingNet<float> embedding;
  nn::EncoderNet<float> encoder;
  nn::ClassifierHead<float> head;
  DbscanParams dbscan;
  double margin = 1.0;
  bool embedding_frozen = true;
  json manifest = json::object();

  std::size_t parameter_count() const { return nn::param_count(embedding, encoder, head); }

  // Trainable tensors in file order, then buffers.
  nn::ParamList<float> tensors() {
    auto out = embedding.parameters();
    for (auto& p : encoder.parameters()) out.push_back(p);
    for (auto& p : head.parameters()) out.push_back(p);
    for (auto& p : embedding.buffers()) out.push_back(p);
    return out;
  }
};

struct Prediction {
  TrafficClass label = TrafficClass::benign;
  std::array<double, 2> probabilities{0.5, 0.5};
};

inline Prediction prediction_from_logits(float benign_logit, float malicious_logit) {
  Prediction p;
  // Exactly equal logits resolve to benign.
  p.label = malicious_logit > benign_logit ? TrafficClass::malicious : TrafficClass::benign;
  const double a = benign_logit;
  const double b = malicious_logit;
  const double mx = std::max(a, b);
  const double ea = std::exp(a - mx);
  const double eb = std::exp(b - mx);
  p.probabilities = {ea / (ea + eb), eb / (ea + eb)};
  return p;
}

inline Prediction predict_vector(const ModelBundle& bundle, const FeatureVector& v) {
  const nn::Matrix<float> x = Eigen::Map<const nn::Matrix<float>>(v.data(), static_cast<nn::Index>(kInputDim), 1);
  const auto logits = nn::detector_forward(x, bundle.embedding, bundle.encoder, bundle.head);
  return prediction_from_logits(logits(0, 0), logits(1, 0));
}

inline Prediction predict(const ModelBundle& bundle, const RawFeatureRecord& record) {
  return predict_vector(bundle, vectorize(record, bundle.scaler));
}

inline std::vector<Prediction> predict_batch(const ModelBundle& bundle, std::span<const FeatureVector> vectors) {
  std::vector<Prediction> out;
  out.reserve(vectors.size());
  constexpr std::size_t chunk = 4096;
  for (std::size_t start = 0; start < vectors.size(); start += chunk) {
    const std::size_t b = std::min(chunk, vectors.size() - start);
    const auto logits =
        nn::detector_forward(to_matrix(vectors.subspan(start, b)), bundle.embedding, bundle.encoder, bundle.head);
    for (nn::Index c = 0; c < logits.cols(); ++c) out.push_back(prediction_from_logits(logits(0, c), logits(1, c)));
  }
  return out;
}

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(::crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size())));
}

}  // namespace detail

inline constexpr std::string_view kModelMagic = "FLOWXPT1";

// Layout: magic, u32 header length, JSON header, float32 LE tensors in the
// order listed by the header, u32 CRC-32 of all preceding bytes.
inline std::vector<std::uint8_t> serialize_model(ModelBundle& bundle) {
  json h;
  h["format"] = 1;
  auto& arch = h["architecture"];
  arch["input_dim"] = bundle.embedding.in_features();
  arch["embedding_hidden"] = bundle.embedding.fc1.out_features();
  arch["embedding_dim"] = bundle.embedding.out_features();
  arch["encoder"] = {bundle.encoder.fc1.in_features(), bundle.encoder.fc1.out_features(),
                     bundle.encoder.fc2.out_features(), bundle.encoder.fc3.out_features()};
  arch["classes"] = bundle.head.fc.out_features();
  arch["leaky_slope"] = bundle.embedding.act.slope;
  arch["batchnorm_epsilon"] = bundle.embedding.bn.epsilon;
  arch["batchnorm_momentum"] = bundle.embedding.bn.momentum;
  h["scaler"] = {{"features", kContinuousFeatureNames}, {"min", bundle.scaler.min}, {"max", bundle.scaler.max}};
  h["protocol_vocabulary"] = kProtocolVocabulary;
  h["margin"] = bundle.margin;
  h["dbscan"] = {{"eps", bundle.dbscan.eps}, {"min_pts", bundle.dbscan.min_pts}};
  h["embedding_frozen"] = bundle.embedding_frozen;
  h["manifest"] = bundle.manifest;
  auto tensors = bundle.tensors();
  std::size_t trainable_bytes = 0;
  for (const auto& t : tensors) {
    h["tensors"].push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"trainable", t.trainable}});
    if (t.trainable) trainable_bytes += t.value.size() * sizeof(float);
  }
  h["trainable_bytes"] = trainable_bytes;

  const std::string header = h.dump();
  std::vector<std::uint8_t> out(kModelMagic.begin(), kModelMagic.end());
  detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  for (const auto& t : tensors) {
    for (float v : t.value) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  detail::put_u32(out, detail::crc32_of(out));
  return out;
}

inline ModelBundle deserialize_model(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t prefix = 8 + 4;
  if (bytes.size() < prefix + 4) throw CorruptModelFile("model file too short");
  if (!std::equal(kModelMagic.begin(), kModelMagic.end(), bytes.begin())) throw CorruptModelFile("bad magic");
  const std::uint32_t stored_crc = detail::get_u32(bytes.data() + bytes.size() - 4);
  if (detail::crc32_of(bytes.first(bytes.size() - 4)) != stored_crc) throw CorruptModelFile("checksum mismatch");
  const std::uint32_t header_len = detail::get_u32(bytes.data() + 8);
  if (prefix + header_len + 4 > bytes.size()) throw CorruptModelFile("header length exceeds file size");

  json h;
  try {
    h = json::parse(bytes.begin() + prefix, bytes.begin() + static_cast<std::ptrdiff_t>(prefix + header_len));
  } catch (const json::exception& e) {
    throw CorruptModelFile(std::string("unreadable header: ") + e.what());
  }

  try {
    const auto& arch = h.at("architecture");
    const auto enc = arch.at("encoder").get<std::vector<nn::Index>>();
    if (enc.size() != 4) throw CorruptModelFile("encoder dims");
    ModelBundle b{
        Scaler{},
        nn::EmbeddingNet<float>(arch.at("input_dim").get<nn::Index>(), arch.at("embedding_hidden").get<nn::Index>(),
                                arch.at("embedding_dim").get<nn::Index>()),
        nn::EncoderNet<float>(enc[0], enc[1], enc[2], enc[3]),
        nn::ClassifierHead<float>(enc[3], arch.at("classes").get<nn::Index>()),
        DbscanParams{},
    };
    const auto slope = arch.at("leaky_slope").get<float>();
    b.embedding.act.slope = slope;
    b.encoder.act1.slope = slope;
    b.encoder.act2.slope = slope;
    b.embedding.bn.epsilon = arch.at("batchnorm_epsilon").get<float>();
    b.embedding.bn.momentum = arch.at("batchnorm_momentum").get<float>();
    b.scaler.min = h.at("scaler").at("min").get<std::array<double, kContinuousFeatures>>();
    b.scaler.max = h.at("scaler").at("max").get<std::array<double, kContinuousFeatures>>();
    b.margin = h.at("margin").get<double>();
    b.dbscan.eps = h.at("dbscan").at("eps").get<double>();
    b.dbscan.min_pts = h.at("dbscan").at("min_pts").get<std::size_t>();
    b.embedding_frozen = h.at("embedding_frozen").get<bool>();
    b.manifest = h.at("manifest");

    auto tensors = b.tensors();
    const auto& declared = h.at("tensors");
    if (declared.size() != tensors.size()) throw CorruptModelFile("tensor count mismatch");
    std::size_t off = prefix + header_len;
    for (std::size_t k = 0; k < tensors.size(); ++k) {
      auto& t = tensors[k];
      if (declared[k].at("name").get<std::string>() != t.name ||
          declared[k].at("shape").get<std::vector<nn::Index>>() != std::vector<nn::Index>{t.rows, t.cols}) {
        throw CorruptModelFile("tensor " + std::to_string(k) + " does not match the declared architecture");
      }
      const std::size_t need = t.value.size() * 4;
      if (off + need > bytes.size() - 4) throw CorruptModelFile("length mismatch: tensor data truncated");
      for (std::size_t i = 0; i < t.value.size(); ++i) {
        t.value[i] = std::bit_cast<float>(detail::get_u32(bytes.data() + off + 4 * i));
      }
      off += need;
    }
    if (off != bytes.size() - 4) throw CorruptModelFile("length mismatch: trailing bytes after tensors");
    return b;
  } catch (const json::exception& e) {
    throw CorruptModelFile(std::string("malformed header: ") + e.what());
  }
}

inline void save_model(ModelBundle& bundle, const std::string& path) {
  const auto bytes = serialize_model(bundle);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write model: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

inline ModelBundle load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

// ---------------------------------------------------------------------------
// Full training pipeline
// ---------------------------------------------------------------------------

// FNV-1a over the vectorized training data and labels.
inline std::string dataset_fingerprint(std::span<const FeatureVector> vectors, std::span<const TrafficClass> labels) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](std::uint8_t b) { h = (h ^ b) * 1099511628211ULL; };
  for (const auto& v : vectors) {
    for (float f : v) {
      const auto u = std::bit_cast<std::uint32_t>(f);
      for (int i = 0; i < 4; ++i) mix(static_cast<std::uint8_t>(u >> (8 * i)));
    }
  }
  for (auto l : labels) mix(static_cast<std::uint8_t>(l));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct PipelineConfig {
  DbscanParams dbscan;
  EmbedTrainConfig embed;
  DetectorTrainConfig detector;
};

struct PipelineResult {
  ModelBundle bundle;
  std::vector<std::size_t> embed_sample;  // indices into the training split
  PseudoLabels pseudo_labels;
  std::vector<double> embed_loss;
  std::vector<double> detector_loss;
};

inline json manifest_for(const PipelineConfig& cfg) {
  auto opt = [](nn::OptimizerKind k) { return k == nn::OptimizerKind::adam ? "adam" : "sgd"; };
  return {
      {"embedding",
       {{"epochs", cfg.embed.epochs},
        {"batch_size", cfg.embed.batch_size},
        {"learning_rate", cfg.embed.learning_rate},
        {"margin", cfg.embed.margin},
        {"seed", cfg.embed.seed},
        {"downsample_rate", cfg.embed.downsample_rate},
        {"optimizer", opt(cfg.embed.optimizer)}}},
      {"detector",
       {{"epochs", cfg.detector.epochs},
        {"batch_size", cfg.detector.batch_size},
        {"learning_rate", cfg.detector.learning_rate},
        {"seed", cfg.detector.seed},
        {"optimizer", opt(cfg.detector.optimizer)}}},
      {"dbscan", {{"eps", cfg.dbscan.eps}, {"min_pts", cfg.dbscan.min_pts}}},
  };
}

// Scaler fit, downsample, DBSCAN pseudo-labels and contrastive training of the
// embedding. The returned bundle carries untrained encoder/head weights.
inline PipelineResult train_embedding_stage(std::span<const RawFeatureRecord> records,
                                            std::span<const TrafficClass> labels, const PipelineConfig& cfg) {
  PipelineResult res;
  auto& b = res.bundle;
  b.scaler = fit_scaler(records);
  b.dbscan = cfg.dbscan;
  b.margin = cfg.embed.margin;
  const auto vectors = vectorize_all(records, b.scaler);

  res.embed_sample = downsample(vectors.size(), cfg.embed.downsample_rate, cfg.embed.seed);
  const auto sample = gather(std::span<const FeatureVector>(vectors), std::span<const std::size_t>(res.embed_sample));
  res.pseudo_labels = dbscan(sample, cfg.dbscan);
  auto trained = train_embedding(to_matrix(sample), res.pseudo_labels.ids, cfg.embed);
  b.embedding = std::move(trained.net);
  res.embed_loss = std::move(trained.epoch_loss);

  b.manifest = manifest_for(cfg);
  b.manifest["stage"] = "embedding";
  b.manifest["training_records"] = records.size();
  b.manifest["embedding_samples"] = sample.size();
  b.manifest["clusters"] = res.pseudo_labels.clusters;
  b.manifest["noise_samples"] = res.pseudo_labels.noise_count();
  b.manifest["dataset_hash"] = dataset_fingerprint(vectors, labels);
  return res;
}

// Detector training on the full split with a frozen embedding from `stage`.
inline void train_detector_stage(PipelineResult& stage, std::span<const RawFeatureRecord> records,
                                 std::span<const TrafficClass> labels, const DetectorTrainConfig& cfg) {
  auto& b = stage.bundle;
  const auto vectors = vectorize_all(records, b.scaler);
  auto trained = train_detector(to_matrix(vectors), labels, b.embedding, cfg);
  b.encoder = std::move(trained.encoder);
  b.head = std::move(trained.head);
  b.embedding_frozen = true;
  stage.detector_loss = std::move(trained.epoch_loss);
  b.manifest["stage"] = "detector";
  b.manifest["detector"]["epochs"] = cfg.epochs;
  b.manifest["detector"]["batch_size"] = cfg.batch_size;
  b.manifest["detector"]["learning_rate"] = cfg.learning_rate;
  b.manifest["detector"]["seed"] = cfg.seed;
}

inline PipelineResult train_pipeline(std::span<const RawFeatureRecord> records, std::span<const TrafficClass> labels,
                                     const PipelineConfig& cfg) {
  auto res = train_embedding_stage(records, labels, cfg);
  train_detector_stage(res, records, labels, cfg.detector);
  return res;
}

}  // namespace flowxpert
