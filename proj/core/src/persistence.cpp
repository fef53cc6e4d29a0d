// SPDX-License-Identifier: Apache-2.0
#include "countadapt/persistence.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "binio.hpp"

namespace countadapt {
namespace {

constexpr std::string_view kMagic = "MDC1";
constexpr std::uint32_t kMaxDim = 1u << 20;

void write_header(binio::Writer& w, ModuleKind kind, int feature_dim) {
  w.bytes(kMagic);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(kind));
  w.u32(static_cast<std::uint32_t>(feature_dim));
  w.u64(architecture_fingerprint(feature_dim));
}

struct Header {
  int feature_dim = 0;
  std::uint64_t fingerprint = 0;
};

Header read_header(binio::Reader& r, ModuleKind kind, const std::string& origin) {
  if (r.remaining() < kMagic.size() || r.bytes(kMagic.size()) != kMagic) r.fail("bad magic");
  const auto version = r.u32();
  if (version != kFormatVersion) {
    throw Error(ErrorCode::version_mismatch,
                origin + ": format version " + std::to_string(version) + ", expected " + std::to_string(kFormatVersion));
  }
  const auto k = r.u32();
  if (k != static_cast<std::uint32_t>(kind)) r.fail("unexpected module kind " + std::to_string(k));
  Header h;
  const auto dim = r.u32();
  if (dim == 0 || dim > kMaxDim) r.fail("implausible feature_dim");
  h.feature_dim = static_cast<int>(dim);
  h.fingerprint = r.u64();
  if (h.fingerprint != architecture_fingerprint(h.feature_dim)) {
    throw Error(ErrorCode::fingerprint_mismatch, origin + ": header fingerprint does not match its feature_dim");
  }
  return h;
}

void check_against_model(const Header& h, const CountingModel& model, const std::string& origin) {
  if (h.fingerprint != architecture_fingerprint(model.feature_dim())) {
    throw Error(ErrorCode::fingerprint_mismatch,
                origin + ": built for feature_dim " + std::to_string(h.feature_dim) + ", core has " +
                    std::to_string(model.feature_dim()));
  }
}

void write_vector(binio::Writer& w, const Vector& v) {
  w.u32(static_cast<std::uint32_t>(v.size()));
  w.f64s({v.data(), static_cast<std::size_t>(v.size())});
}

Vector read_vector(binio::Reader& r, std::optional<Eigen::Index> expected = std::nullopt) {
  const auto n = r.u32();
  if (n > kMaxDim) r.fail("vector too long");
  if (expected && n != *expected) r.fail("vector length mismatch");
  Vector v(n);
  r.f64s({v.data(), n});
  return v;
}

void write_doubles(binio::Writer& w, const std::vector<double>& v) {
  w.u64(v.size());
  w.f64s(v);
}

std::vector<double> read_doubles(binio::Reader& r) {
  const auto n = r.u64();
  if (n > r.remaining() / 8) r.fail("array longer than file");
  std::vector<double> v(n);
  r.f64s(v);
  return v;
}

void write_dense(binio::Writer& w, const DenseLayer& l) {
  w.u32(static_cast<std::uint32_t>(l.weight.rows()));
  w.u32(static_cast<std::uint32_t>(l.weight.cols()));
  w.f64s({l.weight.data(), static_cast<std::size_t>(l.weight.size())});
  write_vector(w, l.bias);
}

DenseLayer read_dense(binio::Reader& r, Eigen::Index rows, Eigen::Index cols) {
  const auto fr = r.u32();
  const auto fc = r.u32();
  if (fr != rows || fc != cols) r.fail("dense layer shape mismatch");
  DenseLayer l;
  l.weight.resize(rows, cols);
  r.f64s({l.weight.data(), static_cast<std::size_t>(l.weight.size())});
  l.bias = read_vector(r, cols);
  return l;
}

void write_adapter(binio::Writer& w, const AdapterModule& m) {
  w.u32(static_cast<std::uint32_t>(m.dim));
  write_vector(w, m.gamma);
  write_vector(w, m.bn_gain);
  write_vector(w, m.bn_bias);
  write_vector(w, m.running_mean);
  write_vector(w, m.running_var);
  w.f64(m.bn_epsilon);
  w.f64(m.bn_momentum);
}

AdapterModule read_adapter(binio::Reader& r, int expected_dim) {
  AdapterModule m;
  const auto dim = r.u32();
  if (static_cast<int>(dim) != expected_dim) r.fail("adapter width mismatch");
  m.dim = expected_dim;
  m.gamma = read_vector(r, dim);
  m.bn_gain = read_vector(r, dim);
  m.bn_bias = read_vector(r, dim);
  m.running_mean = read_vector(r, dim);
  m.running_var = read_vector(r, dim);
  m.bn_epsilon = r.f64();
  m.bn_momentum = r.f64();
  return m;
}

void write_trainables(binio::Writer& w, const AdapterTrainables& t) {
  write_vector(w, t.gamma);
  write_vector(w, t.bn_gain);
  write_vector(w, t.bn_bias);
}

AdapterTrainables read_trainables(binio::Reader& r, int dim) {
  AdapterTrainables t;
  t.gamma = read_vector(r, dim);
  t.bn_gain = read_vector(r, dim);
  t.bn_bias = read_vector(r, dim);
  return t;
}

void write_refiner(binio::Writer& w, const RefinementNet& net) {
  w.u32(static_cast<std::uint32_t>(net.layers.size()));
  for (const auto& l : net.layers) {
    w.u32(static_cast<std::uint32_t>(l.in_channels));
    w.u32(static_cast<std::uint32_t>(l.out_channels));
    write_doubles(w, l.weight);
    write_doubles(w, l.bias);
  }
}

RefinementNet read_refiner(binio::Reader& r) {
  RefinementNet net;
  const auto n = r.u32();
  if (n > 1024) r.fail("too many refiner layers");
  int prev = -1;
  for (std::uint32_t i = 0; i < n; ++i) {
    ConvLayer l;
    l.in_channels = static_cast<int>(r.u32());
    l.out_channels = static_cast<int>(r.u32());
    if (l.in_channels <= 0 || l.out_channels <= 0 || l.in_channels > 4096 || l.out_channels > 4096) {
      r.fail("bad refiner channel count");
    }
    if (prev >= 0 && l.in_channels != prev) r.fail("refiner channel chain broken");
    prev = l.out_channels;
    l.weight = read_doubles(r);
    l.bias = read_doubles(r);
    if (l.weight.size() != static_cast<std::size_t>(9 * l.in_channels * l.out_channels) ||
        l.bias.size() != static_cast<std::size_t>(l.out_channels)) {
      r.fail("refiner layer size mismatch");
    }
    net.layers.push_back(std::move(l));
  }
  return net;
}

bool same_shape(const RefinementNet& a, const RefinementNet& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (a.layers[i].in_channels != b.layers[i].in_channels || a.layers[i].out_channels != b.layers[i].out_channels) {
      return false;
    }
  }
  return true;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex;
  ss.width(16);
  ss.fill('0');
  ss << v;
  return ss.str();
}

std::uint64_t parse_hex64(const std::string& s, const std::string& key) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v, 16);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw Error(ErrorCode::format_error, "manifest: bad hex value for " + key);
  }
  return v;
}

long long parse_int(const std::string& s, const std::string& key) {
  long long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw Error(ErrorCode::format_error, "manifest: bad integer for " + key);
  }
  return v;
}

std::uint64_t hash_bytes(std::span<const char> bytes) { return fnv1a64({bytes.data(), bytes.size()}); }

void write_bytes(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io_error, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io_error, "short write to " + path.string());
}

CountingModel parse_shared(std::span<const char> bytes, const std::string& origin,
                           std::optional<std::uint64_t> expected) {
  binio::Reader r(bytes, origin);
  const Header h = read_header(r, ModuleKind::shared, origin);
  if (expected && *expected != h.fingerprint) {
    throw Error(ErrorCode::fingerprint_mismatch, origin + ": architecture fingerprint differs from the expected one");
  }
  const bool frozen = r.u8() != 0;
  CountingModel model = zero_counting_model(h.feature_dim);
  auto& layers = model.mutable_shared();
  int in = h.feature_dim;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i] = read_dense(r, in, kHeadWidths[i]);
    in = kHeadWidths[i];
  }
  r.expect_end();
  if (frozen) model.freeze_shared();
  return model;
}

std::string parse_domain_into(CountingModel& model, std::span<const char> bytes, const std::string& origin,
                              std::optional<std::string> rename) {
  binio::Reader r(bytes, origin);
  const Header h = read_header(r, ModuleKind::domain, origin);
  check_against_model(h, model, origin);
  std::string name = r.str();
  if (rename) name = *rename;
  require_valid_domain_id(name);

  const auto dims = adapter_dims(model.feature_dim());
  const auto count = r.u32();
  if (count != dims.size()) r.fail("adapter count mismatch");
  DomainEntry e;
  for (int d : dims) e.adapters.modules.push_back(read_adapter(r, d));
  if (r.u8() != 0) {
    for (int d : dims) e.adagrad.push_back(read_trainables(r, d));
  }
  e.steps_done = r.u64();
  if (r.u8() != 0) e.refiner = read_refiner(r);
  if (r.u8() != 0) {
    RefinerTrainingState s;
    s.accum = read_refiner(r);
    s.steps_done = r.u64();
    if (!e.refiner || !same_shape(*e.refiner, s.accum)) r.fail("refiner state does not match refiner");
    e.refiner_state = std::move(s);
  }
  r.expect_end();
  model.set_domain(name, std::move(e));
  return name;
}

DomainClassifierHead parse_classifier(const CountingModel& model, std::span<const char> bytes,
                                      const std::string& origin) {
  binio::Reader r(bytes, origin);
  const Header h = read_header(r, ModuleKind::classifier, origin);
  check_against_model(h, model, origin);
  DomainClassifierHead head;
  const auto k = r.u32();
  if (k < 2 || k > 4096) r.fail("bad class count");
  for (std::uint32_t i = 0; i < k; ++i) {
    head.domains.push_back(r.str());
    require_valid_domain_id(head.domains.back());
  }
  const auto dims = adapter_dims(model.feature_dim());
  const auto n = r.u32();
  if (n != 5) r.fail("classifier adapter count mismatch");
  for (std::size_t i = 0; i < 5; ++i) head.adapters.push_back(read_adapter(r, dims[i]));
  head.final_layer = read_dense(r, kHeadWidths[3], k);
  r.expect_end();
  return head;
}

}  // namespace

std::uint64_t architecture_fingerprint(int feature_dim) {
  std::ostringstream ss;
  ss << "countadapt-head;N=" << feature_dim << ";widths=";
  for (int w : kHeadWidths) ss << w << ',';
  ss << ";adapters=";
  for (int d : adapter_dims(feature_dim)) ss << d << ',';
  ss << ";adapter=residual-bn;refiner=conv3x3-same";
  return fnv1a64(ss.str());
}

std::vector<char> serialize_shared(const CountingModel& model) {
  binio::Writer w;
  write_header(w, ModuleKind::shared, model.feature_dim());
  w.u8(model.shared_frozen() ? 1 : 0);
  for (const auto& l : model.shared()) write_dense(w, l);
  return w.buffer();
}

std::vector<char> serialize_domain(const CountingModel& model, std::string_view domain) {
  const DomainEntry& e = model.domain(domain);
  binio::Writer w;
  write_header(w, ModuleKind::domain, model.feature_dim());
  w.str(domain);
  w.u32(static_cast<std::uint32_t>(e.adapters.modules.size()));
  for (const auto& m : e.adapters.modules) write_adapter(w, m);
  w.u8(e.adagrad.empty() ? 0 : 1);
  for (const auto& t : e.adagrad) write_trainables(w, t);
  w.u64(e.steps_done);
  w.u8(e.refiner ? 1 : 0);
  if (e.refiner) write_refiner(w, *e.refiner);
  w.u8(e.refiner_state ? 1 : 0);
  if (e.refiner_state) {
    write_refiner(w, e.refiner_state->accum);
    w.u64(e.refiner_state->steps_done);
  }
  return w.buffer();
}

std::vector<char> serialize_classifier(const CountingModel& model, const DomainClassifierHead& head) {
  binio::Writer w;
  write_header(w, ModuleKind::classifier, model.feature_dim());
  w.u32(static_cast<std::uint32_t>(head.domains.size()));
  for (const auto& d : head.domains) w.str(d);
  w.u32(static_cast<std::uint32_t>(head.adapters.size()));
  for (const auto& m : head.adapters) write_adapter(w, m);
  write_dense(w, head.final_layer);
  return w.buffer();
}

std::uint64_t shared_hash(const CountingModel& model) { return hash_bytes(serialize_shared(model)); }

void save_shared(const CountingModel& model, const std::filesystem::path& path) {
  write_bytes(path, serialize_shared(model));
}

CountingModel load_shared(const std::filesystem::path& path, std::optional<std::uint64_t> expected_fingerprint) {
  const auto bytes = binio::read_file(path);
  return parse_shared(bytes, path.string(), expected_fingerprint);
}

void save_domain(const CountingModel& model, std::string_view domain, const std::filesystem::path& path) {
  write_bytes(path, serialize_domain(model, domain));
}

std::string load_domain(CountingModel& model, const std::filesystem::path& path, std::optional<std::string> rename) {
  const auto bytes = binio::read_file(path);
  return parse_domain_into(model, bytes, path.string(), std::move(rename));
}

void save_classifier(const CountingModel& model, const DomainClassifierHead& head, const std::filesystem::path& path) {
  write_bytes(path, serialize_classifier(model, head));
}

DomainClassifierHead load_classifier(const CountingModel& model, const std::filesystem::path& path) {
  const auto bytes = binio::read_file(path);
  return parse_classifier(model, bytes, path.string());
}

void save_archive(const ModelArchive& archive, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  archive.extractor.validate();
  if (archive.patch_size <= 0) {
    throw Error(ErrorCode::invalid_argument, "patch size must be positive");
  }
  const auto& model = archive.model;
  std::error_code ec;
  fs::create_directories(dir / "domains", ec);
  if (ec) throw Error(ErrorCode::io_error, "cannot create " + (dir / "domains").string() + ": " + ec.message());

  const auto names = model.domain_names();
  for (const auto& entry : fs::directory_iterator(dir / "domains")) {
    const auto& p = entry.path();
    if (p.extension() != ".mdc") continue;
    if (std::find(names.begin(), names.end(), p.stem().string()) == names.end()) fs::remove(p);
  }
  if (!archive.classifier) fs::remove(dir / "classifier.mdc", ec);

  std::ostringstream m;
  m << "format_version=" << kFormatVersion << '\n'
    << "feature_dim=" << model.feature_dim() << '\n'
    << "fingerprint=" << hex64(architecture_fingerprint(model.feature_dim())) << '\n'
    << "patch_size=" << archive.patch_size << '\n'
    << "extractor.seed=" << archive.extractor.seed << '\n'
    << "extractor.layers=" << archive.extractor.layers_string() << '\n'
    << "extractor.input_channels=" << archive.extractor.input_channels << '\n'
    << "extractor.activation="
    << (archive.extractor.nonlinearity == Nonlinearity::rectifier ? "relu" : "identity") << '\n';

  const auto shared = serialize_shared(model);
  write_bytes(dir / "shared.mdc", shared);
  m << "shared=shared.mdc " << hex64(hash_bytes(shared)) << '\n';
  for (const auto& name : names) {
    const auto bytes = serialize_domain(model, name);
    const std::string rel = "domains/" + name + ".mdc";
    write_bytes(dir / rel, bytes);
    m << "domain." << name << '=' << rel << ' ' << hex64(hash_bytes(bytes)) << '\n';
  }
  if (archive.classifier) {
    const auto bytes = serialize_classifier(model, *archive.classifier);
    write_bytes(dir / "classifier.mdc", bytes);
    m << "classifier=classifier.mdc " << hex64(hash_bytes(bytes)) << '\n';
  }
  const std::string text = m.str();
  write_bytes(dir / "manifest.txt", std::vector<char>(text.begin(), text.end()));
}

ModelArchive load_archive(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.txt";
  std::ifstream in(manifest_path);
  if (!in) throw Error(ErrorCode::io_error, "cannot open " + manifest_path.string());
  std::map<std::string, std::string> kv;
  std::vector<std::string> domain_keys;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::format_error, "manifest: malformed line '" + line + "'");
    std::string key = line.substr(0, eq);
    if (key.starts_with("domain.")) domain_keys.push_back(key);
    if (!kv.emplace(std::move(key), line.substr(eq + 1)).second) {
      throw Error(ErrorCode::format_error, "manifest: duplicate key in '" + line + "'");
    }
  }
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw Error(ErrorCode::format_error, "manifest: missing key " + key);
    return it->second;
  };
  const auto version = parse_int(get("format_version"), "format_version");
  if (version != kFormatVersion) {
    throw Error(ErrorCode::version_mismatch, "manifest: format version " + std::to_string(version) +
                                                 ", expected " + std::to_string(kFormatVersion));
  }
  const auto dim = parse_int(get("feature_dim"), "feature_dim");
  if (dim <= 0 || dim > kMaxDim) throw Error(ErrorCode::format_error, "manifest: bad feature_dim");
  const auto fingerprint = parse_hex64(get("fingerprint"), "fingerprint");
  if (fingerprint != architecture_fingerprint(static_cast<int>(dim))) {
    throw Error(ErrorCode::fingerprint_mismatch, "manifest: fingerprint does not match feature_dim");
  }

  FrozenExtractorSpec ex;
  ex.seed = static_cast<std::uint64_t>(std::stoull(get("extractor.seed")));
  ex.layers = FrozenExtractorSpec::parse_layers(get("extractor.layers"));
  ex.input_channels = static_cast<int>(parse_int(get("extractor.input_channels"), "extractor.input_channels"));
  const auto& act = get("extractor.activation");
  if (act == "relu") {
    ex.nonlinearity = Nonlinearity::rectifier;
  } else if (act == "identity") {
    ex.nonlinearity = Nonlinearity::identity;
  } else {
    throw Error(ErrorCode::format_error, "manifest: unknown extractor.activation " + act);
  }
  ex.validate();
  if (ex.output_dim() != dim) {
    throw Error(ErrorCode::fingerprint_mismatch, "manifest: extractor output width differs from feature_dim");
  }

  // "file hash" -> verified bytes
  auto component = [&](const std::string& key) {
    const std::string& v = get(key);
    const auto sp = v.find(' ');
    if (sp == std::string::npos) throw Error(ErrorCode::format_error, "manifest: " + key + " lacks a hash");
    const std::string rel = v.substr(0, sp);
    if (rel.find("..") != std::string::npos || rel.starts_with('/')) {
      throw Error(ErrorCode::format_error, "manifest: suspicious path for " + key);
    }
    auto bytes = binio::read_file(dir / rel);
    if (hash_bytes(bytes) != parse_hex64(v.substr(sp + 1), key)) {
      throw Error(ErrorCode::format_error, (dir / rel).string() + ": content hash differs from manifest");
    }
    return std::make_pair((dir / rel).string(), std::move(bytes));
  };

  const auto [shared_path, shared_bytes] = component("shared");
  ModelArchive a{parse_shared(shared_bytes, shared_path, fingerprint), ex, 0, std::nullopt};
  a.patch_size = static_cast<int>(parse_int(get("patch_size"), "patch_size"));
  if (a.patch_size <= 0) throw Error(ErrorCode::format_error, "manifest: bad patch_size");
  for (const auto& key : domain_keys) {
    const auto [path, bytes] = component(key);
    const std::string name = parse_domain_into(a.model, bytes, path, std::nullopt);
    if ("domain." + name != key) throw Error(ErrorCode::format_error, path + ": stored name differs from manifest");
  }
  if (kv.contains("classifier")) {
    const auto [path, bytes] = component("classifier");
    a.classifier = parse_classifier(a.model, bytes, path);
  }
  return a;
}

}  // namespace countadapt
