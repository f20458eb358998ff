// SPDX-License-Identifier: Apache-2.0
//
// Small classification networks for the harness: a chain of conv /
// attention blocks, a pooling-or-flatten head, deterministic seeded
// initialization, and a parameter registry for the optimizer.

#pragma once

#include <string>
#include <variant>
#include <vector>

#include "strattn/block.hpp"

namespace strattn {

enum class StageKind { conv, stra };
enum class HeadKind { flatten, gap };

struct StageSpec {
  StageKind kind = StageKind::conv;
  std::size_t out_channels = 16;
  int repeat = 1;
  int stride = 1;   // applied by the first block of the stage; conv stages only
  int kernel = 3;   // conv stages only
};

struct ArchConfig {
  std::size_t in_channels = 3;
  std::size_t input_h = 32, input_w = 32;
  std::vector<StageSpec> stages;
  HeadKind head = HeadKind::flatten;
  std::size_t classes = 4;

  // attention-stage hyper-parameters (shared by every stra stage)
  std::size_t mid_per_mode = 8;  // C_m
  int groups = 4;                // G
  int window = 3;                // K
  Gating gating = Gating::sigmoid;
  bool interaction = true;
  SpatialVariant spatial = SpatialVariant::local_attn;
  bool mode_attention = true;
  BnMode bn = BnMode::training;
  bool masks_from_input = false;
  bool mean_pool = false;
  bool scaled_inner = false;
  bool context_uses_mixed = true;
  bool omit_final_projection = false;

  BlockConfig block_config(std::size_t in_ch, std::size_t out_ch) const {
    BlockConfig b;
    b.in_channels = in_ch;
    b.out_channels = out_ch;
    b.mid_per_mode = mid_per_mode;
    b.groups = groups;
    b.window = window;
    b.gating = gating;
    b.interaction = interaction;
    b.masks_from_input = masks_from_input;
    b.spatial = spatial;
    b.mode_attention = mode_attention;
    b.bn = bn;
    b.mean_pool = mean_pool;
    b.scaled_inner = scaled_inner;
    b.context_uses_mixed = context_uses_mixed;
    b.omit_final_projection = omit_final_projection;
    return b;
  }
};

template <class S>
class Model {
 public:
  using BlockVariant = std::variant<ConvBlock<S>, StraBlock<S>>;

  struct FeatureShape {
    std::size_t channels, h, w;
  };

  Model() = default;

  const ArchConfig& arch() const { return arch_; }
  std::size_t feature_dim() const { return feat_dim_; }

  static Model build(const ArchConfig& arch, Rng& rng) {
    Model m;
    m.arch_ = arch;
    if (arch.stages.empty()) throw ShapeError("arch: needs at least one stage");
    std::size_t ch = arch.in_channels;
    std::size_t h = arch.input_h, w = arch.input_w;
    for (const auto& st : arch.stages) {
      if (st.repeat < 1) throw ShapeError("arch: stage repeat must be >= 1");
      for (int r = 0; r < st.repeat; ++r) {
        const int stride = r == 0 ? st.stride : 1;
        if (st.kind == StageKind::conv) {
          m.blocks_.emplace_back(ConvBlock<S>::init(ch, st.out_channels,
                                                    std::size_t(st.kernel), stride, arch.bn,
                                                    rng));
          h = (h + 2 * (std::size_t(st.kernel) / 2) - std::size_t(st.kernel)) /
                  std::size_t(stride) +
              1;
          w = (w + 2 * (std::size_t(st.kernel) / 2) - std::size_t(st.kernel)) /
                  std::size_t(stride) +
              1;
        } else {
          if (stride != 1)
            throw ShapeError("arch: attention stages run at stride 1; downsample with a "
                             "conv stage instead");
          m.blocks_.emplace_back(StraBlock<S>::init(arch.block_config(ch, st.out_channels),
                                                    rng));
        }
        ch = st.out_channels;
      }
    }
    m.feat_shape_ = {ch, h, w};
    m.feat_dim_ = arch.head == HeadKind::flatten ? ch * h * w : ch;
    m.fc_w_ = seeded_init<S>({arch.classes, m.feat_dim_}, m.feat_dim_, rng);
    m.fc_b_ = Tensor<S>({arch.classes});
    m.fc_gw_ = Tensor<S>(m.fc_w_.shape());
    m.fc_gb_ = Tensor<S>(m.fc_b_.shape());
    return m;
  }

  void set_train(bool train) {
    for (auto& b : blocks_)
      std::visit([&](auto& blk) { blk.set_train(train); }, b);
  }

  // Runs the chain and keeps every cache for a later backward() call.
  Tensor<S> forward(const Tensor<S>& images) {
    require_rank(images, 4, "model input");
    conv_caches_.assign(blocks_.size(), {});
    stra_caches_.assign(blocks_.size(), {});
    Tensor<S> x = images;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      if (auto* cb = std::get_if<ConvBlock<S>>(&blocks_[i]))
        x = cb->forward(x, conv_caches_[i]);
      else
        x = std::get<StraBlock<S>>(blocks_[i]).forward(x, stra_caches_[i]);
    }
    features_ = std::move(x);
    const std::size_t n = features_.extent(0);
    Tensor<S> feat({n, feat_dim_});
    if (arch_.head == HeadKind::flatten) {
      std::copy(features_.begin(), features_.end(), feat.begin());
    } else {
      const std::size_t area = feat_shape_.h * feat_shape_.w;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < feat_shape_.channels; ++c) {
          S acc = 0;
          const S* p = features_.data() + (b * feat_shape_.channels + c) * area;
          for (std::size_t i = 0; i < area; ++i) acc += p[i];
          feat(b, c) = acc / S(area);
        }
    }
    head_in_ = std::move(feat);
    Tensor<S> logits({n, arch_.classes});
    ConstMatMap<S> fm(head_in_.data(), n, feat_dim_);
    ConstMatMap<S> wm(fc_w_.data(), arch_.classes, feat_dim_);
    MatMap<S> lm(logits.data(), n, arch_.classes);
    lm.noalias() = fm * wm.transpose();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t c = 0; c < arch_.classes; ++c) logits(b, c) += fc_b_[c];
    return logits;
  }

  // Pointers to the mode caches of the attention blocks that ran mode
  // attention in the last forward (order = block order).
  std::vector<const ModeCache<S>*> mode_states() const {
    std::vector<const ModeCache<S>*> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      if (std::holds_alternative<StraBlock<S>>(blocks_[i]) && stra_caches_[i].mode)
        out.push_back(&*stra_caches_[i].mode);
    return out;
  }

  // grad_masks: per mode-attention block (same order as mode_states()),
  // nullable entries allowed.
  void backward(const Tensor<S>& grad_logits,
                const std::vector<const Tensor<S>*>& grad_masks = {}) {
    const std::size_t n = grad_logits.extent(0);
    // head backward
    {
      ConstMatMap<S> gl(grad_logits.data(), n, arch_.classes);
      ConstMatMap<S> fm(head_in_.data(), n, feat_dim_);
      MatMap<S> gw(fc_gw_.data(), arch_.classes, feat_dim_);
      gw.noalias() += gl.transpose() * fm;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < arch_.classes; ++c) fc_gb_[c] += grad_logits(b, c);
    }
    Tensor<S> gfeat({n, feat_dim_});
    {
      ConstMatMap<S> gl(grad_logits.data(), n, arch_.classes);
      ConstMatMap<S> wm(fc_w_.data(), arch_.classes, feat_dim_);
      MatMap<S> gf(gfeat.data(), n, feat_dim_);
      gf.noalias() = gl * wm;
    }
    Tensor<S> gx(features_.shape());
    if (arch_.head == HeadKind::flatten) {
      std::copy(gfeat.begin(), gfeat.end(), gx.begin());
    } else {
      const std::size_t area = feat_shape_.h * feat_shape_.w;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < feat_shape_.channels; ++c) {
          const S v = gfeat(b, c) / S(area);
          S* p = gx.data() + (b * feat_shape_.channels + c) * area;
          for (std::size_t i = 0; i < area; ++i) p[i] = v;
        }
    }
    // blocks in reverse; hand each mode block its mask gradient
    std::size_t mode_idx = 0;
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      if (std::holds_alternative<StraBlock<S>>(blocks_[i]) && stra_caches_[i].mode) ++mode_idx;
    for (std::size_t i = blocks_.size(); i-- > 0;) {
      if (auto* cb = std::get_if<ConvBlock<S>>(&blocks_[i])) {
        gx = cb->backward(gx, conv_caches_[i]);
      } else {
        auto& sb = std::get<StraBlock<S>>(blocks_[i]);
        const Tensor<S>* gm = nullptr;
        if (stra_caches_[i].mode) {
          --mode_idx;
          if (mode_idx < grad_masks.size()) gm = grad_masks[mode_idx];
        }
        gx = sb.backward(gx, stra_caches_[i], gm);
      }
    }
  }

  std::vector<ParamRef<S>> params() {
    std::vector<ParamRef<S>> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string prefix = "block" + std::to_string(i);
      std::visit([&](auto& blk) { blk.collect(prefix, out); }, blocks_[i]);
    }
    out.push_back({"head.w", &fc_w_, &fc_gw_});
    out.push_back({"head.b", &fc_b_, &fc_gb_});
    return out;
  }

  // Buffers that persist across steps but are not optimized (BN running
  // statistics); checkpointed alongside the parameters.
  std::vector<ParamRef<S>> buffers() {
    std::vector<ParamRef<S>> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string prefix = "block" + std::to_string(i);
      auto add_bn = [&](const std::string& name, BatchNormLayer<S>* bn) {
        if (!bn) return;
        out.push_back({prefix + name + ".running_mean", &bn->p.running_mean, nullptr});
        out.push_back({prefix + name + ".running_var", &bn->p.running_var, nullptr});
      };
      if (auto* cb = std::get_if<ConvBlock<S>>(&blocks_[i])) {
        add_bn(".bn", cb->bn.get());
      } else {
        auto& sb = std::get<StraBlock<S>>(blocks_[i]);
        add_bn(".bn_in", sb.bn_in.get());
        add_bn(".bn_spatial", sb.bn_spatial.get());
        add_bn(".bn_out", sb.bn_out.get());
        add_bn(".bn_skip", sb.bn_skip.get());
        if (sb.attn && sb.attn->value_bn) {
          out.push_back({prefix + ".attn.bn.running_mean", &sb.attn->value_bn->running_mean,
                         nullptr});
          out.push_back({prefix + ".attn.bn.running_var", &sb.attn->value_bn->running_var,
                         nullptr});
        }
      }
    }
    return out;
  }

  void zero_grad() {
    for (auto& b : blocks_)
      std::visit([](auto& blk) { blk.zero_grad(); }, b);
    std::fill(fc_gw_.begin(), fc_gw_.end(), S(0));
    std::fill(fc_gb_.begin(), fc_gb_.end(), S(0));
  }

  std::size_t param_count() {
    std::size_t total = 0;
    for (const auto& p : params()) total += p.value->numel();
    return total;
  }

  FeatureShape feature_shape() const { return feat_shape_; }
  const Tensor<S>& last_features() const { return features_; }

 private:
  ArchConfig arch_;
  std::vector<BlockVariant> blocks_;
  std::vector<typename ConvBlock<S>::Cache> conv_caches_;
  std::vector<typename StraBlock<S>::Cache> stra_caches_;
  FeatureShape feat_shape_{};
  std::size_t feat_dim_ = 0;
  Tensor<S> features_, head_in_;
  Tensor<S> fc_w_, fc_b_, fc_gw_, fc_gb_;
};

template <class S>
Model<S> build_network(const ArchConfig& arch, Rng& rng) {
  return Model<S>::build(arch, rng);
}

}  // namespace strattn
