// SPDX-License-Identifier: Apache-2.0
#include "countadapt/refiner.hpp"

#include <algorithm>
#include <map>
#include <numeric>

#include "countadapt/init.hpp"
#include "countadapt/regressor.hpp"

namespace countadapt {
namespace {

// Channel-major activations of one grid: C × H × W.
struct Activation {
  int channels = 0;
  std::vector<double> v;
};

void conv3x3_same(const ConvLayer& layer, const double* in, double* out, int h, int w) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int o = 0; o < layer.out_channels; ++o) {
    double* dst = out + o * plane;
    std::fill(dst, dst + plane, layer.bias[o]);
    for (int i = 0; i < layer.in_channels; ++i) {
      const double* src = in + i * plane;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const double wt = layer.weight[layer.weight_index(o, i, ky, kx)];
          const int dy = ky - 1, dx = kx - 1;
          const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          for (int y = y0; y < y1; ++y) {
            const double* s = src + (y + dy) * w + dx;
            double* d = dst + y * w;
            for (int x = x0; x < x1; ++x) d[x] += wt * s[x];
          }
        }
      }
    }
  }
}

// Forward keeping every layer's pre-activation for backward. pre[l] is layer l's output
// before the rectifier; inputs are the rectified outputs of the previous layer.
struct Tape {
  std::vector<Activation> inputs;
  std::vector<Activation> pre;
};

std::vector<double> forward_grid(const RefinementNet& net, const EstimateGrid& grid, Tape* tape) {
  const int h = grid.shape.rows, w = grid.shape.cols;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Activation a{1, grid.values};
  for (const auto& layer : net.layers) {
    if (layer.in_channels != a.channels) {
      throw Error(ErrorCode::dimension_mismatch, "refiner layer channel chain is broken");
    }
    Activation z{layer.out_channels, std::vector<double>(plane * layer.out_channels)};
    conv3x3_same(layer, a.v.data(), z.v.data(), h, w);
    Activation r = z;
    for (double& v : r.v) v = v > 0.0 ? v : 0.0;
    if (tape) {
      tape->inputs.push_back(std::move(a));
      tape->pre.push_back(std::move(z));
    }
    a = std::move(r);
  }
  if (a.channels != 1) throw Error(ErrorCode::dimension_mismatch, "refiner must end with one channel");
  return std::move(a.v);
}

void backward_grid(const RefinementNet& net, const Tape& tape, std::vector<double> dout, int h, int w,
                   RefinementNet& grads) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int l = static_cast<int>(net.layers.size()) - 1; l >= 0; --l) {
    const ConvLayer& layer = net.layers[l];
    ConvLayer& g = grads.layers[l];
    const auto& pre = tape.pre[l].v;
    const auto& in = tape.inputs[l].v;
    for (std::size_t i = 0; i < dout.size(); ++i)
      if (!(pre[i] > 0.0)) dout[i] = 0.0;
    std::vector<double> din(in.size(), 0.0);
    for (int o = 0; o < layer.out_channels; ++o) {
      const double* dz = dout.data() + o * plane;
      g.bias[o] += std::accumulate(dz, dz + plane, 0.0);
      for (int i = 0; i < layer.in_channels; ++i) {
        const double* src = in.data() + i * plane;
        double* dsrc = din.data() + i * plane;
        for (int ky = 0; ky < 3; ++ky) {
          for (int kx = 0; kx < 3; ++kx) {
            const std::size_t wi = layer.weight_index(o, i, ky, kx);
            const double wt = layer.weight[wi];
            const int dy = ky - 1, dx = kx - 1;
            const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
            const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
            double acc = 0.0;
            for (int y = y0; y < y1; ++y) {
              const double* s = src + (y + dy) * w + dx;
              double* ds = dsrc + (y + dy) * w + dx;
              const double* d = dz + y * w;
              for (int x = x0; x < x1; ++x) {
                acc += d[x] * s[x];
                ds[x] += d[x] * wt;
              }
            }
            g.weight[wi] += acc;
          }
        }
      }
    }
    dout = std::move(din);
  }
}

void check_pair(const RefinementPair& p) {
  if (p.estimate.shape != p.truth.shape) {
    throw Error(ErrorCode::dimension_mismatch, "refinement pair '" + p.estimate.scene_id +
                                                   "' has mismatched grid shapes");
  }
  if (p.estimate.shape.rows < 1 || p.estimate.shape.cols < 1 ||
      p.estimate.values.size() != static_cast<std::size_t>(p.estimate.shape.size()) ||
      p.truth.values.size() != p.estimate.values.size()) {
    throw Error(ErrorCode::dimension_mismatch, "refinement grid values do not match its shape");
  }
}

}  // namespace

double EstimateGrid::sum() const {
  double s = 0.0;
  for (double v : values) s += v;
  return s;
}

RefinementNet RefinementNet::create(std::span<const int> channels, std::uint64_t seed) {
  RefinementNet net;
  Rng rng(derive_seed(seed, "refiner"));
  for (std::size_t l = 1; l < channels.size(); ++l) {
    ConvLayer layer;
    layer.in_channels = channels[l - 1];
    layer.out_channels = channels[l];
    if (layer.in_channels < 1 || layer.out_channels < 1) {
      throw Error(ErrorCode::invalid_argument, "refiner channel counts must be >= 1");
    }
    layer.weight.resize(static_cast<std::size_t>(9) * layer.in_channels * layer.out_channels);
    layer.bias.assign(static_cast<std::size_t>(layer.out_channels), 0.0);
    glorot_uniform_fill(layer.weight, 9 * layer.in_channels, 9 * layer.out_channels, rng);
    net.layers.push_back(std::move(layer));
  }
  return net;
}

RefinementNet RefinementNet::create_default(std::uint64_t seed) { return create(kRefinerChannels, seed); }

RefinementNet RefinementNet::zeros_like(const RefinementNet& like) {
  RefinementNet z = like;
  for (auto& l : z.layers) {
    std::fill(l.weight.begin(), l.weight.end(), 0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
  }
  return z;
}

std::size_t refiner_param_count(const RefinementNet& net) {
  std::size_t n = 0;
  for (const auto& l : net.layers) {
    n += static_cast<std::size_t>(9) * l.in_channels * l.out_channels + l.out_channels;
  }
  return n;
}

EstimateGrid refine(const RefinementNet& net, const EstimateGrid& grid) {
  if (grid.shape.rows < 1 || grid.shape.cols < 1 ||
      grid.values.size() != static_cast<std::size_t>(grid.shape.size())) {
    throw Error(ErrorCode::dimension_mismatch, "estimate grid values do not match its shape");
  }
  EstimateGrid out;
  out.shape = grid.shape;
  out.scene_id = grid.scene_id;
  out.values = net.layers.empty() ? grid.values : forward_grid(net, grid, nullptr);
  return out;
}

std::vector<double> refiner_pre_activations(const RefinementNet& net, const EstimateGrid& grid) {
  Tape tape;
  (void)forward_grid(net, grid, &tape);
  std::vector<double> out;
  for (const auto& p : tape.pre) out.insert(out.end(), p.v.begin(), p.v.end());
  return out;
}

double refiner_loss_and_grad(const RefinementNet& net, std::span<const RefinementPair> batch,
                             RefinementNet* grads) {
  if (batch.empty()) return 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (const auto& p : batch) {
    check_pair(p);
    Tape tape;
    const auto out = forward_grid(net, p.estimate, grads ? &tape : nullptr);
    std::vector<double> dout(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double d = out[i] - p.truth.values[i];
      loss += d * d;
      dout[i] = d * inv_b;
    }
    if (grads) backward_grid(net, tape, std::move(dout), p.estimate.shape.rows, p.estimate.shape.cols, *grads);
  }
  return 0.5 * loss * inv_b;
}

TrainLog train_refiner(RefinementNet& net, std::span<const RefinementPair> pairs,
                       const TrainConfig& config, RefinerTrainingState* state) {
  config.validate();
  if (pairs.empty()) throw Error(ErrorCode::invalid_argument, "no refinement pairs to train on");
  for (const auto& p : pairs) check_pair(p);

  std::map<std::pair<int, int>, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    buckets[{pairs[i].estimate.shape.rows, pairs[i].estimate.shape.cols}].push_back(i);
  }
  RefinerTrainingState local;
  RefinerTrainingState& st = state ? *state : local;
  if (st.accum.layers.empty()) {
    st.accum = RefinementNet::zeros_like(net);
    for (auto& l : st.accum.layers) {
      std::fill(l.weight.begin(), l.weight.end(), config.initial_accumulator);
      std::fill(l.bias.begin(), l.bias.end(), config.initial_accumulator);
    }
  }

  const std::size_t nb = buckets.size();
  std::vector<BatchSampler> samplers;
  std::vector<const std::vector<std::size_t>*> members;
  std::size_t b = 0;
  for (const auto& [shape, idx] : buckets) {
    samplers.emplace_back(idx.size(), static_cast<std::size_t>(config.batch_size),
                          derive_seed(config.seed, "refiner/" + std::to_string(shape.first) + "x" +
                                                       std::to_string(shape.second)));
    // Bucket b was drawn at steps b, b + nb, b + 2nb, ... before this session.
    const std::uint64_t drawn = st.steps_done > b ? (st.steps_done - b + nb - 1) / nb : 0;
    samplers.back().skip(drawn);
    members.push_back(&idx);
    ++b;
  }

  TrainLog log;
  std::vector<RefinementPair> batch;
  for (int it = 0; it < config.iterations; ++it) {
    const std::size_t bucket = st.steps_done % nb;
    batch.clear();
    for (std::size_t j : samplers[bucket].next()) batch.push_back(pairs[(*members[bucket])[j]]);
    RefinementNet grads = RefinementNet::zeros_like(net);
    log.loss.push_back(refiner_loss_and_grad(net, batch, &grads));
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      adagrad_update(net.layers[l].weight, grads.layers[l].weight, st.accum.layers[l].weight,
                     config.learning_rate, config.weight_decay, config.adagrad_epsilon);
      adagrad_update(net.layers[l].bias, grads.layers[l].bias, st.accum.layers[l].bias,
                     config.learning_rate, 0.0, config.adagrad_epsilon);
    }
    ++st.steps_done;
  }
  return log;
}

std::vector<RefinementPair> build_refinement_pairs(const CountingModel& model,
                                                   std::span<const SceneFeatures> scenes,
                                                   std::string_view domain) {
  std::vector<RefinementPair> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) {
    RefinementPair p;
    p.estimate = predict_grid(model, s, domain).grid;
    p.truth.shape = s.grid;
    p.truth.scene_id = s.scene_id;
    p.truth.values = s.gt_grid;
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<RefinementPair> build_refinement_pairs(const CountingModel& model,
                                                   const FrozenExtractor& extractor,
                                                   std::span<const Scene> scenes,
                                                   std::string_view domain, int patch_size) {
  const auto feats = extract_dataset_features(extractor, scenes, patch_size);
  return build_refinement_pairs(model, feats, domain);
}

}  // namespace countadapt
