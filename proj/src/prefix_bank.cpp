#include "pfx/prefix_bank.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "pfx/io.hpp"
#include "pfx/kernels.hpp"

namespace pfx {

int AspectSchema::index_of(const std::string& attribute) const {
  for (int i = 0; i < size(); ++i)
    if (attributes[i] == attribute) return i;
  return -1;
}

void AspectSchema::validate() const {
  require(!aspect.empty(), "aspect schema needs a name");
  require(!attributes.empty(), "aspect " + aspect + " needs at least one attribute");
  std::set<std::string> seen(attributes.begin(), attributes.end());
  require(seen.size() == attributes.size(), "aspect " + aspect + " has duplicate attribute names");
}

PrefixBank::PrefixBank(AspectSchema schema, int length, int dim, std::vector<float> table)
    : schema_(std::move(schema)), length_(length), dim_(dim), table_(std::move(table)) {
  schema_.validate();
  require(length > 0 && dim > 0, "prefix bank needs positive length and dim");
  require(table_.size() == static_cast<std::size_t>(size()) * length * dim, "prefix bank table is not N x M x D");
  for (float v : table_) require(std::isfinite(v), "prefix bank contains non-finite values");
}

std::span<const float> PrefixBank::prefix_data(int i) const {
  require(i >= 0 && i < size(), "prefix index " + std::to_string(i) + " out of range");
  const std::size_t stride = static_cast<std::size_t>(length_) * dim_;
  return std::span<const float>(table_).subspan(i * stride, stride);
}

PrefixKV<float> PrefixBank::materialize(int i) const {
  auto d = prefix_data(i);
  return PrefixKV<float>(length_, dim_, std::vector<float>(d.begin(), d.end()));
}

template <class T>
ReparamBank<T>::ReparamBank(AspectSchema schema, int length, int dim, int bottleneck, std::uint64_t seed,
                            double init_std)
    : schema_(std::move(schema)), length_(length), dim_(dim), bottleneck_(bottleneck) {
  schema_.validate();
  require(length > 0 && dim > 0 && bottleneck >= 0, "reparam bank: invalid shape");
  const std::size_t N = size();
  const std::size_t n = bottleneck_ > 0 ? N * length * bottleneck + N * bottleneck * dim : N * length * dim;
  params_.resize(n);
  Rng rng(seed);
  for (auto& v : params_) v = static_cast<T>(init_std * rng.normal());
}

template <class T>
ReparamBank<T> ReparamBank<T>::direct(const PrefixBank& bank) {
  ReparamBank out(bank.schema(), bank.length(), bank.dim(), 0, 0);
  std::copy(bank.table().begin(), bank.table().end(), out.params_.begin());
  return out;
}

template <class T>
std::span<T> ReparamBank<T>::bottleneck_table() {
  if (is_direct()) return params_;
  return std::span(params_).subspan(0, static_cast<std::size_t>(size()) * length_ * bottleneck_);
}

template <class T>
std::span<T> ReparamBank<T>::projection(int i) {
  require(!is_direct(), "direct banks have no projection");
  require(i >= 0 && i < size(), "prefix index out of range");
  const std::size_t w = static_cast<std::size_t>(bottleneck_) * dim_;
  return std::span(params_).subspan(static_cast<std::size_t>(size()) * length_ * bottleneck_ + i * w, w);
}

template <class T>
PrefixKV<T> ReparamBank<T>::materialize(int i) const {
  require(i >= 0 && i < size(), "prefix index " + std::to_string(i) + " out of range");
  const std::size_t md = static_cast<std::size_t>(length_) * dim_;
  if (is_direct()) return PrefixKV<T>(length_, dim_, std::vector<T>(params_.begin() + i * md, params_.begin() + (i + 1) * md));
  const std::size_t hm = static_cast<std::size_t>(length_) * bottleneck_;
  const std::size_t w = static_cast<std::size_t>(bottleneck_) * dim_;
  std::span<const T> h(params_.data() + i * hm, hm);
  std::span<const T> W(params_.data() + size() * hm + i * w, w);
  std::vector<T> out(md);
  kernels::linear_forward<T>(out, h, W, {}, length_, bottleneck_, dim_);
  return PrefixKV<T>(length_, dim_, std::move(out));
}

template <class T>
std::vector<PrefixKV<T>> ReparamBank<T>::materialize_all() const {
  std::vector<PrefixKV<T>> out;
  for (int i = 0; i < size(); ++i) out.push_back(materialize(i));
  return out;
}

template <class T>
void ReparamBank<T>::backward(int i, std::span<const T> d_prefix, std::span<T> d_params) const {
  require(d_params.size() == params_.size(), "reparam backward: gradient buffer size mismatch");
  const std::size_t md = static_cast<std::size_t>(length_) * dim_;
  require(d_prefix.size() == md, "reparam backward: prefix gradient is not M x D");
  if (is_direct()) {
    for (std::size_t k = 0; k < md; ++k) d_params[i * md + k] += d_prefix[k];
    return;
  }
  const std::size_t hm = static_cast<std::size_t>(length_) * bottleneck_;
  const std::size_t w = static_cast<std::size_t>(bottleneck_) * dim_;
  std::span<const T> h(params_.data() + i * hm, hm);
  std::span<const T> W(params_.data() + size() * hm + i * w, w);
  std::vector<T> dh(hm);
  kernels::linear_backward<T>(dh, d_params.subspan(size() * hm + i * w, w), {}, d_prefix, h, W, length_, bottleneck_,
                              dim_);
  for (std::size_t k = 0; k < hm; ++k) d_params[i * hm + k] += dh[k];
}

template <class T>
PrefixBank ReparamBank<T>::export_bank(const Provenance& provenance) const {
  std::vector<float> table;
  table.reserve(static_cast<std::size_t>(size()) * length_ * dim_);
  for (int i = 0; i < size(); ++i) {
    const auto p = materialize(i);
    for (T v : p.data()) table.push_back(static_cast<float>(v));
  }
  PrefixBank bank(schema_, length_, dim_, std::move(table));
  bank.trained = true;
  bank.provenance = provenance;
  return bank;
}

template class ReparamBank<float>;
template class ReparamBank<double>;

PrefixKV<float> concat_aspects(std::span<const std::pair<const PrefixBank*, int>> selections) {
  require(!selections.empty(), "concat: at least one selection required");
  std::vector<PrefixKV<float>> parts;
  for (const auto& [bank, index] : selections) {
    require(bank != nullptr, "concat: null bank");
    if (bank->dim() != selections.front().first->dim())
      throw Error("concat: bank " + bank->schema().aspect + " has D=" + std::to_string(bank->dim()) + ", expected " +
                  std::to_string(selections.front().first->dim()));
    parts.push_back(bank->materialize(index));
  }
  return concat_prefixes<float>(parts);
}

namespace {
void check_permutation(std::span<const int> perm, int n) {
  require(static_cast<int>(perm.size()) == n, "permutation has wrong length");
  std::vector<bool> seen(n, false);
  for (int p : perm) {
    require(p >= 0 && p < n && !seen[p], "not a permutation of 0..N-1");
    seen[p] = true;
  }
}

PrefixBank reorder(const PrefixBank& bank, std::span<const int> perm, bool move_names) {
  check_permutation(perm, bank.size());
  AspectSchema schema = bank.schema();
  std::vector<float> table;
  table.reserve(bank.table().size());
  for (int a = 0; a < bank.size(); ++a) {
    auto row = bank.prefix_data(perm[a]);
    table.insert(table.end(), row.begin(), row.end());
    if (move_names) schema.attributes[a] = bank.schema().attributes[perm[a]];
  }
  PrefixBank out(std::move(schema), bank.length(), bank.dim(), std::move(table));
  out.trained = bank.trained;
  out.provenance = bank.provenance;
  return out;
}
}  // namespace

PrefixBank permute_attributes(const PrefixBank& bank, std::span<const int> perm) { return reorder(bank, perm, true); }

PrefixBank align_to_schema(const PrefixBank& bank, std::span<const int> perm) { return reorder(bank, perm, false); }

std::vector<int> best_alignment(const std::vector<std::vector<int>>& counts) {
  const int n = static_cast<int>(counts.size());
  require(n >= 1 && n <= 8, "alignment supports 1..8 attributes");
  for (const auto& row : counts) require(static_cast<int>(row.size()) == n, "alignment counts must be N x N");
  std::vector<int> perm(n), best;
  std::iota(perm.begin(), perm.end(), 0);
  long best_score = -1;
  do {
    long score = 0;
    for (int a = 0; a < n; ++a) score += counts[perm[a]][a];
    if (score > best_score) {
      best_score = score;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

ParameterBudget parameter_budget(int n, int length, int bottleneck, const ModelConfig& model) {
  ParameterBudget b;
  const std::size_t D = model.activation_dim();
  b.exported = static_cast<std::size_t>(n) * length * D;
  b.training = bottleneck > 0 ? static_cast<std::size_t>(n) * length * bottleneck + static_cast<std::size_t>(n) * bottleneck * D
                              : b.exported;
  b.frozen = parameter_count(model);
  return b;
}

std::vector<std::uint8_t> serialize_bank(const PrefixBank& bank) {
  io::Writer w;
  w.magic("PFXB");
  w.u32(kBankFormatVersion);
  w.str(bank.schema().aspect);
  w.u32(static_cast<std::uint32_t>(bank.size()));
  w.u32(static_cast<std::uint32_t>(bank.length()));
  w.u32(static_cast<std::uint32_t>(bank.dim()));
  for (const auto& a : bank.schema().attributes) w.str(a);
  w.str(bank.provenance.regime);
  w.u64(bank.provenance.seed);
  w.str(bank.provenance.config_hash);
  w.u8(bank.trained ? 1 : 0);
  w.floats(bank.table());
  return std::move(w.buffer());
}

PrefixBank deserialize_bank(std::span<const std::uint8_t> data) {
  io::Reader r(data);
  r.expect_magic("PFXB");
  const auto ver = r.u32();
  if (ver != kBankFormatVersion) throw Error("bank file version " + std::to_string(ver) + " is not supported");
  AspectSchema schema;
  schema.aspect = r.str();
  const auto n = r.u32(), m = r.u32(), d = r.u32();
  if (n == 0 || n > 4096) throw Error("bank file has an implausible attribute count");
  for (std::uint32_t i = 0; i < n; ++i) schema.attributes.push_back(r.str());
  Provenance prov;
  prov.regime = r.str();
  prov.seed = r.u64();
  prov.config_hash = r.str();
  const bool trained = r.u8() != 0;
  const std::size_t count = static_cast<std::size_t>(n) * m * d;
  if (r.remaining() != count * 4) throw Error("bank file payload size does not match N x M x D");
  PrefixBank bank(std::move(schema), static_cast<int>(m), static_cast<int>(d), r.floats(count));
  bank.trained = trained;
  bank.provenance = std::move(prov);
  return bank;
}

void save_bank(const PrefixBank& bank, const std::string& path) { io::write_file(path, serialize_bank(bank)); }

PrefixBank load_bank(const std::string& path) { return deserialize_bank(io::read_file(path)); }

}  // namespace pfx
