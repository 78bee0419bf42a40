#include "maskx/transfer.hpp"

#include <fstream>
#include <sstream>

#include "maskx/heads.hpp"
#include "maskx/rng.hpp"

namespace maskx {

EmbeddingSource embedding_source_from(const std::string& name) {
  if (name == "cls") return EmbeddingSource::Cls;
  if (name == "box") return EmbeddingSource::Box;
  if (name == "cls+box") return EmbeddingSource::ClsBox;
  if (name == "randn") return EmbeddingSource::Randn;
  if (name == "external") return EmbeddingSource::External;
  fail("unknown embedding source '" + name + "' (cls|box|cls+box|randn|external)");
}

std::string embedding_source_name(EmbeddingSource s) {
  switch (s) {
    case EmbeddingSource::Cls: return "cls";
    case EmbeddingSource::Box: return "box";
    case EmbeddingSource::ClsBox: return "cls+box";
    case EmbeddingSource::Randn: return "randn";
    case EmbeddingSource::External: return "external";
  }
  return "?";
}

void TransferSpec::validate() const {
  check(layers >= 1 && layers <= 3, "transfer: layers must be in 1..3");
  check(hidden >= 0, "transfer: hidden width must be >= 1 (or 0 for default)");
  check(leaky_slope > 0, "transfer: leaky slope must be > 0");
  if (source == EmbeddingSource::External)
    check(!external_path.empty(), "transfer: external source needs a file path");
}

std::string TransferSpec::arch_label() const {
  return std::to_string(layers) + "-" + (layers == 1 ? "none" : (relu_act ? "relu" : "leaky_relu"));
}

int embedding_width(EmbeddingSource source, int trunk_dim) {
  const int d1 = trunk_dim + 1;
  switch (source) {
    case EmbeddingSource::Cls: return d1;
    case EmbeddingSource::Box: return 4 * d1;
    case EmbeddingSource::ClsBox: return 5 * d1;
    case EmbeddingSource::Randn: return 5 * d1;
    case EmbeddingSource::External: fail("embedding_width: external width comes from the file");
  }
  fail("embedding_width: bad source");
}

Tensor randn_embedding(int num_classes, int width, uint64_t seed) {
  Tensor t({num_classes, width});
  for (int c = 0; c < num_classes; ++c) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(c)));
    for (int j = 0; j < width; ++j) t.at2(c, j) = static_cast<float>(rng.normal());
  }
  return t;
}

Tensor load_external_embedding(const std::string& path, int expected_classes) {
  std::ifstream in(path);
  check(in.good(), "external embedding: cannot open " + path);
  std::string tag;
  int c = 0, din = 0;
  in >> tag >> c >> din;
  check(tag == "embedding", "external embedding: bad header in " + path);
  check(c == expected_classes,
        "external embedding: file has " + std::to_string(c) + " classes, expected " +
            std::to_string(expected_classes));
  check(din >= 1, "external embedding: bad width");
  Tensor t({c, din});
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < din; ++j) {
      double v;
      check(static_cast<bool>(in >> v), "external embedding: truncated file");
      t.at2(i, j) = static_cast<float>(v);
    }
  return t;
}

void save_external_embedding(const std::string& path, const Tensor& rows) {
  check(rows.ndims() == 2, "external embedding: rows must be 2-d");
  std::ofstream out(path);
  check(out.good(), "external embedding: cannot write " + path);
  out << "embedding " << rows.dim(0) << ' ' << rows.dim(1) << '\n';
  for (int i = 0; i < rows.dim(0); ++i) {
    for (int j = 0; j < rows.dim(1); ++j) {
      if (j) out << ' ';
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(rows.at2(i, j)));
      out << buf;
    }
    out << '\n';
  }
}

Tape::Id build_class_embedding(TapeModel& tm, const TransferSpec& spec) {
  Tape& t = tm.tape();
  Model& m = tm.model();
  const int C = m.cfg.num_classes;
  const int D = m.cfg.dims.D;
  switch (spec.source) {
    case EmbeddingSource::Cls:
      // background row 0 carries no class; rows 1..C are the embeddings
      return t.slice_rows(tm.param("box.cls.w"), 1, C + 1);
    case EmbeddingSource::Box:
      // class-major rows: 4 consecutive regression rows per class
      return t.reshape(tm.param("box.box.w"), {C, 4 * (D + 1)});
    case EmbeddingSource::ClsBox: {
      const Tape::Id cls = t.slice_rows(tm.param("box.cls.w"), 1, C + 1);
      const Tape::Id box = t.reshape(tm.param("box.box.w"), {C, 4 * (D + 1)});
      return t.concat({cls, box}, 1);
    }
    case EmbeddingSource::Randn:
      return t.leaf(randn_embedding(C, embedding_width(spec.source, D), spec.randn_seed), false);
    case EmbeddingSource::External: {
      check(m.external_embedding.numel() > 0, "external embedding not loaded");
      return t.leaf(m.external_embedding, false);
    }
  }
  fail("build_class_embedding: bad source");
}

Tape::Id transfer_forward(TapeModel& tm, Tape::Id embedding, const TransferSpec& spec) {
  spec.validate();
  Tape& t = tm.tape();
  Tape::Id x = spec.stop_grad ? t.stop_gradient(embedding) : embedding;
  for (int l = 0; l < spec.layers; ++l) {
    x = t.linear(x, tm.param("transfer.l" + std::to_string(l) + ".w"));
    if (l + 1 < spec.layers)
      x = spec.relu_act ? t.relu(x) : t.leaky_relu(x, spec.leaky_slope);
  }
  return x;
}

}  // namespace maskx
