#pragma once

#include <cstddef>
#include <string>

#include "aligngen/errors.hpp"
#include "aligngen/promptkit.hpp"

namespace aligngen {

// Architecture of the whole model: text encoder, redux encoder, DEM and the
// diffusion transformer. Defaults are the full desk-scale configuration.
struct ModelConfig {
  std::size_t vocab_size = prompt::Vocabulary::standard().size();
  std::size_t max_text_len = prompt::kDefaultMaxLen;
  std::size_t d = 64;
  std::size_t blocks = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  int patch = 4;
  int image_size = 16;
  std::size_t lora_rank = 16;
  std::size_t text_heads = 4;
  std::size_t dem_heads = 4;
  std::size_t dem_mlp_ratio = 4;
  std::size_t redux_tokens = 16;
  int redux_patch = 2;
  bool normalize_redux = false;
  double rope_base = 100.0;
  // Column shift applied to reference positions; 0 means grid width.
  int ref_col_offset = 0;
  bool symmetric_mask = false;

  int grid() const { return image_size / patch; }
  std::size_t num_patches() const { return static_cast<std::size_t>(grid()) * grid(); }
  std::size_t patch_dim() const { return static_cast<std::size_t>(patch) * patch * 3; }
  std::size_t head_dim() const { return d / heads; }
  int ref_offset() const { return ref_col_offset > 0 ? ref_col_offset : grid(); }

  void validate() const {
    auto fail = [](const std::string& m) { throw ArgumentError("model config: " + m); };
    if (d == 0 || heads == 0 || d % heads != 0) fail("d must be divisible by heads");
    if (head_dim() % 4 != 0) fail("head dim (d/heads) must be divisible by 4 for 2D RoPE");
    if (text_heads == 0 || d % text_heads != 0) fail("d must be divisible by text_heads");
    if (dem_heads == 0 || d % dem_heads != 0) fail("d must be divisible by dem_heads");
    if (patch <= 0 || image_size % patch != 0) fail("image_size must be divisible by patch");
    if (redux_patch <= 0 || image_size % redux_patch != 0) fail("image_size must be divisible by redux_patch");
    const int rg = redux_grid();
    if (rg <= 0 || static_cast<std::size_t>(rg * rg) != redux_tokens) fail("redux_tokens must be a square");
    if ((image_size / redux_patch) % rg != 0) fail("redux grid must divide the redux patch grid");
    if (blocks == 0 || mlp_ratio == 0 || lora_rank == 0 || max_text_len == 0) fail("sizes must be positive");
    if (vocab_size < 2) fail("vocab_size too small");
    if (rope_base <= 1.0) fail("rope_base must exceed 1");
  }

  int redux_grid() const {
    int rg = 0;
    while (static_cast<std::size_t>((rg + 1) * (rg + 1)) <= redux_tokens) ++rg;
    return rg;
  }
};

}  // namespace aligngen
