// SPDX-License-Identifier: Apache-2.0
#include "tialab/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace tialab {

namespace {

constexpr size_t kMagicLen = sizeof(kBlobMagic) - 1;
// Guards against absurd allocations from corrupt headers.
constexpr uint64_t kMaxElements = uint64_t{1} << 34;

template <typename U>
void put_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> b{};
  for (size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b.data(), b.size());
}

template <typename U>
U get_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), b.size())) throw LoadError("truncated tensor blob");
  U v = 0;
  for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

}  // namespace

template <typename T>
void write_blob(std::ostream& os, const Tensor<T>& t) {
  os.write(kBlobMagic, kMagicLen);
  put_le<uint32_t>(os, static_cast<uint32_t>(t.rank()));
  for (auto e : t.shape()) put_le<uint64_t>(os, static_cast<uint64_t>(e));
  for (auto v : t.data()) put_le<uint32_t>(os, std::bit_cast<uint32_t>(static_cast<float>(v)));
  if (!os) throw Error("failed writing tensor blob");
}

template <typename T>
Tensor<T> read_blob(std::istream& is) {
  char magic[kMagicLen];
  if (!is.read(magic, kMagicLen)) throw LoadError("truncated tensor blob");
  if (std::memcmp(magic, kBlobMagic, kMagicLen) != 0) throw LoadError("bad tensor blob magic");
  const auto rank = get_le<uint32_t>(is);
  if (rank == 0 || rank > 16) throw LoadError("bad tensor blob rank " + std::to_string(rank));
  Shape shape(rank);
  uint64_t n = 1;
  for (auto& e : shape) {
    const auto ext = get_le<uint64_t>(is);
    if (ext == 0 || ext > kMaxElements) throw LoadError("bad tensor blob extent");
    n *= ext;
    if (n > kMaxElements) throw LoadError("tensor blob too large");
    e = static_cast<int64_t>(ext);
  }
  std::vector<T> values(n);
  for (auto& v : values) v = static_cast<T>(std::bit_cast<float>(get_le<uint32_t>(is)));
  return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T>
void save_blob(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_blob(os, t);
}

template <typename T>
Tensor<T> load_blob(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open " + path.string());
  return read_blob<T>(is);
}

void save_parameters(const std::vector<const Parameter<float>*>& params, const std::filesystem::path& manifest,
                     const std::filesystem::path& blobs) {
  std::ofstream ms(manifest);
  std::ofstream bs(blobs, std::ios::binary);
  if (!ms || !bs) throw Error("cannot write " + manifest.string() + " / " + blobs.string());
  for (const auto* p : params) {
    ms << p->name << ' ' << p->tensor.rank();
    for (auto e : p->tensor.shape()) ms << ' ' << e;
    ms << " trainable=" << (p->trainable ? 1 : 0) << '\n';
    write_blob(bs, p->tensor);
  }
  if (!ms || !bs) throw Error("failed writing " + manifest.string());
}

void load_parameters(const std::vector<Parameter<float>*>& params, const std::filesystem::path& manifest,
                     const std::filesystem::path& blobs) {
  std::ifstream ms(manifest);
  std::ifstream bs(blobs, std::ios::binary);
  if (!ms) throw LoadError("cannot open " + manifest.string());
  if (!bs) throw LoadError("cannot open " + blobs.string());
  std::string line;
  for (auto* p : params) {
    if (!std::getline(ms, line)) throw LoadError("manifest ends before parameter " + p->name);
    std::istringstream ls(line);
    std::string name;
    int64_t rank = 0;
    ls >> name >> rank;
    if (name != p->name) throw LoadError("manifest has '" + name + "' where '" + p->name + "' was expected");
    Shape shape(static_cast<size_t>(std::max<int64_t>(rank, 0)));
    for (auto& e : shape) ls >> e;
    if (!ls || shape != p->tensor.shape()) {
      throw LoadError("shape mismatch for " + p->name + ": file " + shape_str(shape) + ", model " +
                      shape_str(p->tensor.shape()));
    }
    auto t = read_blob<float>(bs);
    if (t.shape() != shape) throw LoadError("blob shape mismatch for " + p->name);
    t.set_requires_grad(p->trainable);
    p->tensor = std::move(t);
  }
  if (std::getline(ms, line) && !line.empty()) throw LoadError("manifest has extra entries");
}

template void write_blob<float>(std::ostream&, const Tensor<float>&);
template void write_blob<double>(std::ostream&, const Tensor<double>&);
template Tensor<float> read_blob<float>(std::istream&);
template Tensor<double> read_blob<double>(std::istream&);
template void save_blob<float>(const std::filesystem::path&, const Tensor<float>&);
template void save_blob<double>(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_blob<float>(const std::filesystem::path&);
template Tensor<double> load_blob<double>(const std::filesystem::path&);

}  // namespace tialab
