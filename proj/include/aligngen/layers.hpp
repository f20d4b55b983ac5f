#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "aligngen/diffcore/ops.hpp"
#include "aligngen/params.hpp"

namespace aligngen::layers {

using ad::Tensor;
using ad::Var;

// Collects post-softmax attention weights when attached to a forward pass.
template <typename T>
struct AttentionProbe {
  std::vector<Tensor<T>> weights;  // one per (block, head), in call order
};

template <typename T>
Var<T> linear(Bound<T>& p, const std::string& prefix, Var<T> x) {
  return ad::linear(x, p(prefix + ".w"), p(prefix + ".b"));
}

// softmax(q k^T / sqrt(dh) + mask) v, per head over column blocks.
template <typename T>
Var<T> multi_head_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads,
                            const Tensor<T>* mask = nullptr,
                            AttentionProbe<T>* probe = nullptr) {
  const std::size_t d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    throw ShapeError("attention: q " + ad::shape_str(q.dims()) + ", k " + ad::shape_str(k.dims()) +
                     ", v " + ad::shape_str(v.dims()));
  }
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  const std::size_t dh = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(T(dh));
  std::vector<Var<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var<T> qh = heads == 1 ? q : ad::slice_cols(q, h * dh, (h + 1) * dh);
    Var<T> kh = heads == 1 ? k : ad::slice_cols(k, h * dh, (h + 1) * dh);
    Var<T> vh = heads == 1 ? v : ad::slice_cols(v, h * dh, (h + 1) * dh);
    Var<T> logits = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
    Var<T> w = ad::softmax_rows(logits, mask);
    if (probe) probe->weights.push_back(w.value());
    outs.push_back(ad::matmul(w, vh));
  }
  return heads == 1 ? outs.front() : ad::concat_cols(outs);
}

template <typename T>
Var<T> mlp(Bound<T>& p, const std::string& prefix, Var<T> x) {
  return linear(p, prefix + ".fc2", ad::gelu(linear(p, prefix + ".fc1", x)));
}

// Parameter initialisation helpers.
template <typename T, typename Rng>
void add_linear(ParamStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out,
                Group group, Rng& rng, double gain = 1.0, bool zero = false) {
  const double std = gain / std::sqrt(static_cast<double>(in));
  store.add(prefix + ".w",
            zero ? Tensor<T>({in, out}) : Tensor<T>::randn({in, out}, rng, static_cast<T>(std)), group,
            true);
  store.add(prefix + ".b", Tensor<T>({1, out}), group, false);
}

// LoRA pair: A Gaussian [in, r], B zero [r, out].
template <typename T, typename Rng>
void add_lora(ParamStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out,
              std::size_t rank, Rng& rng) {
  store.add(prefix + ".a", Tensor<T>::randn({in, rank}, rng, static_cast<T>(1.0 / std::sqrt(double(in)))),
            Group::kLora, true);
  store.add(prefix + ".b", Tensor<T>({rank, out}), Group::kLora, true);
}

// x W + b, plus gate * (x A) B on rows [row_begin, row_end) when a LoRA pair
// named `lora_prefix` exists and the gate is non-zero.
template <typename T>
Var<T> gated_linear(Bound<T>& p, const std::string& prefix, const std::string& lora_prefix, Var<T> x,
                    std::size_t row_begin, std::size_t row_end, T gate) {
  Var<T> y = linear(p, prefix, x);
  if (gate == T(0) || row_begin >= row_end || !p.has(lora_prefix + ".a")) return y;
  Var<T> xs = (row_begin == 0 && row_end == x.rows()) ? x : ad::slice_rows(x, row_begin, row_end);
  Var<T> delta = ad::matmul(ad::matmul(xs, p(lora_prefix + ".a")), p(lora_prefix + ".b"));
  if (gate != T(1)) delta = ad::scale(delta, gate);
  return ad::add_into_rows(y, row_begin, delta);
}

}  // namespace aligngen::layers
