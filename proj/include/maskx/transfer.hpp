#pragma once

#include <cstdint>
#include <string>

#include "maskx/tape.hpp"
#include "maskx/tensor.hpp"

namespace maskx {

class TapeModel;

enum class EmbeddingSource { Cls, Box, ClsBox, Randn, External };

EmbeddingSource embedding_source_from(const std::string& name);
std::string embedding_source_name(EmbeddingSource s);

/// Configuration of the weight transfer function T: embedding -> w_seg row.
struct TransferSpec {
  EmbeddingSource source = EmbeddingSource::ClsBox;
  int layers = 2;  // 1..3 affine layers
  bool relu_act = false;  // false -> LeakyReLU hidden activations
  float leaky_slope = 0.01f;
  int hidden = 0;  // 0 -> defaults to output width E+1
  bool stop_grad = true;
  uint64_t randn_seed = 1234;
  std::string external_path;

  void validate() const;
  std::string arch_label() const;  // e.g. "2-leaky_relu"
};

/// Width of one class's embedding row for the given box-head trunk width D.
/// Randn uses the cls+box width so the control is capacity-matched.
int embedding_width(EmbeddingSource source, int trunk_dim);

/// Deterministic Gaussian embedding; row c depends only on (seed, c).
Tensor randn_embedding(int num_classes, int width, uint64_t seed);

/// File format: header "embedding <C> <Din>", then C whitespace-separated
/// rows of Din reals, one line per class id 1..C.
Tensor load_external_embedding(const std::string& path, int expected_classes);
void save_external_embedding(const std::string& path, const Tensor& rows);

/// Per-class embedding matrix [C, Din] on the tape. Cls/Box/ClsBox read
/// the live detection weights; Randn/External enter as constants.
Tape::Id build_class_embedding(TapeModel& tm, const TransferSpec& spec);

/// w_seg = T(embedding; theta): affine chain with the configured hidden
/// activation, none after the last layer. Output [C, E+1]. When
/// spec.stop_grad is set the embedding enters through stop_gradient.
Tape::Id transfer_forward(TapeModel& tm, Tape::Id embedding, const TransferSpec& spec);

}  // namespace maskx
