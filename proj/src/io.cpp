#include "pfm/io.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "json.hpp"

namespace pfm::io {

namespace {

std::ifstream open_in(const std::filesystem::path& path, std::ios::openmode mode = {}) {
  std::ifstream in(path, std::ios::in | mode);
  if (!in) throw FormatError("cannot open " + path.string() + " for reading");
  return in;
}

std::ofstream open_out(const std::filesystem::path& path, std::ios::openmode mode = {}) {
  std::ofstream out(path, std::ios::out | std::ios::trunc | mode);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  return out;
}

// Yields non-blank lines with comments stripped, tracking line numbers.
class LineReader {
 public:
  explicit LineReader(std::istream& in) : in_(in) {}

  bool next(std::string& line) {
    while (std::getline(in_, line)) {
      ++number_;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      if (line.find_first_not_of(" \t\r") != std::string::npos) return true;
    }
    return false;
  }

  std::string where() const { return "line " + std::to_string(number_); }

 private:
  std::istream& in_;
  int number_ = 0;
};

// Parses exactly the listed fields from a line; trailing tokens are an error.
template <typename... T>
bool parse_fields(const std::string& line, T&... fields) {
  std::istringstream ss(line);
  (ss >> ... >> fields);
  if (!ss) return false;
  std::string rest;
  return !(ss >> rest);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char bytes[8];
  for (int b = 0; b < 8; ++b) bytes[b] = static_cast<unsigned char>(v >> (8 * b));
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

std::uint64_t get_u64(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (in.gcount() != 8) throw FormatError("checkpoint is truncated");
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
  return v;
}

double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

void put_matrix(std::ostream& out, const RowMatrix& m) {
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) put_f64(out, m(r, c));
}

RowMatrix get_matrix(std::istream& in, Index rows, Index cols) {
  RowMatrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = get_f64(in);
  return m;
}

constexpr const char* kMagic = "PFMCKPT";

}  // namespace

CountMatrix read_counts(std::istream& in) {
  LineReader reader(in);
  std::string line;
  if (!reader.next(line)) throw FormatError("counts file is empty; expected header `N D NNZ`");
  Index n = 0;
  Index d = 0;
  Index nnz = 0;
  if (!parse_fields(line, n, d, nnz) || n < 0 || d < 0 || nnz < 0)
    throw FormatError(reader.where() + ": malformed header, expected `N D NNZ`");
  std::vector<CountMatrix::Entry> entries;
  entries.reserve(static_cast<std::size_t>(nnz));
  while (reader.next(line)) {
    Index i = 0;
    Index col = 0;
    std::int64_t count = 0;
    if (!parse_fields(line, i, col, count))
      throw FormatError(reader.where() + ": malformed entry, expected `i d count`");
    if (static_cast<Index>(entries.size()) == nnz)
      throw FormatError(reader.where() + ": more entries than the header's NNZ = " +
                        std::to_string(nnz));
    if (i < 0 || i >= n || col < 0 || col >= d)
      throw FormatError(reader.where() + ": index (" + std::to_string(i) + ", " +
                        std::to_string(col) + ") out of range for " + std::to_string(n) + " x " +
                        std::to_string(d));
    if (count < 1)
      throw FormatError(reader.where() + ": count must be >= 1, got " + std::to_string(count));
    entries.push_back({i, col, count});
  }
  if (static_cast<Index>(entries.size()) != nnz)
    throw FormatError("counts file has " + std::to_string(entries.size()) +
                      " entries but the header declares " + std::to_string(nnz));
  try {
    return CountMatrix(n, d, std::move(entries));
  } catch (const DomainError& e) {
    throw FormatError(e.what());
  }
}

CountMatrix load_counts(const std::filesystem::path& path) {
  auto in = open_in(path);
  try {
    return read_counts(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_counts(std::ostream& out, const CountMatrix& counts) {
  out << counts.n_rows() << ' ' << counts.n_cols() << ' ' << counts.nnz() << '\n';
  for (const auto& e : counts.entries()) out << e.row << ' ' << e.col << ' ' << e.count << '\n';
}

void save_counts(const std::filesystem::path& path, const CountMatrix& counts) {
  auto out = open_out(path);
  write_counts(out, counts);
}

ResponseVector read_responses(std::istream& in, Index expected_rows) {
  LineReader reader(in);
  std::string line;
  std::vector<double> values;
  while (reader.next(line)) {
    double v = 0.0;
    if (!parse_fields(line, v)) throw FormatError(reader.where() + ": expected one real value");
    values.push_back(v);
  }
  if (expected_rows >= 0 && static_cast<Index>(values.size()) != expected_rows)
    throw FormatError("response file has " + std::to_string(values.size()) +
                      " values, expected " + std::to_string(expected_rows));
  return Eigen::Map<const Vector>(values.data(), static_cast<Index>(values.size()));
}

ResponseVector load_responses(const std::filesystem::path& path, Index expected_rows) {
  auto in = open_in(path);
  try {
    return read_responses(in, expected_rows);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_responses(const std::filesystem::path& path, const ResponseVector& y) {
  auto out = open_out(path);
  for (Index i = 0; i < y.size(); ++i) out << format_double(y(i)) << '\n';
}

RowMatrix read_dense(std::istream& in) {
  LineReader reader(in);
  std::string line;
  Index rows = 0;
  Index cols = 0;
  if (!reader.next(line) || !parse_fields(line, rows, cols) || rows < 0 || cols < 0)
    throw FormatError("dense matrix: malformed header, expected `rows cols`");
  RowMatrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    if (!reader.next(line)) throw FormatError("dense matrix: truncated at row " + std::to_string(r));
    std::istringstream ss(line);
    for (Index c = 0; c < cols; ++c)
      if (!(ss >> m(r, c))) throw FormatError(reader.where() + ": too few values");
  }
  return m;
}

void save_dense(const std::filesystem::path& path, const RowMatrix& m) {
  auto out = open_out(path);
  out << m.rows() << ' ' << m.cols() << '\n';
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) out << (c ? " " : "") << format_double(m(r, c));
    out << '\n';
  }
}

RowMatrix load_dense(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_dense(in);
}

Checkpoint make_checkpoint(const ModelConfig& config, const FitResult& result) {
  Checkpoint ck;
  ck.model.config = config;
  ck.model.regression = result.state.regression;
  ck.model.theta = result.state.theta;
  ck.model.beta = result.state.beta;
  ck.iterations = result.iterations;
  if (!result.trace.empty()) ck.final_elbo = result.trace.back().elbo;
  return ck;
}

void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  const auto& m = ck.model;
  const Index k = m.config.n_factors;
  out << kMagic << ' ' << kCheckpointVersion << '\n'
      << "n_rows " << m.theta.n_rows() << " n_cols " << m.beta.n_cols() << " n_factors " << k
      << '\n'
      << "payload little-endian-f64\n";
  put_f64(out, m.config.a);
  put_f64(out, m.config.b);
  put_u64(out, m.config.seed);
  put_f64(out, m.regression.c);
  put_f64(out, m.regression.sigma);
  for (Index j = 0; j < k; ++j) put_f64(out, m.regression.eta(j));
  put_u64(out, static_cast<std::uint64_t>(ck.iterations));
  put_f64(out, ck.final_elbo);
  put_matrix(out, m.theta.shape);
  put_matrix(out, m.theta.rate);
  put_matrix(out, m.beta.shape);
  put_matrix(out, m.beta.rate);
}

Checkpoint read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("checkpoint is empty");
  std::string magic;
  int version = 0;
  if (!parse_fields(line, magic, version) || magic != kMagic)
    throw FormatError("not a checkpoint file (bad magic line)");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint format version " + std::to_string(version) +
                      " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  std::string t1, t2, t3, payload;
  Index n = 0;
  Index d = 0;
  int k = 0;
  if (!std::getline(in, line) || !parse_fields(line, t1, n, t2, d, t3, k) || t1 != "n_rows" ||
      t2 != "n_cols" || t3 != "n_factors" || n < 0 || d < 0 || k < 1)
    throw FormatError("checkpoint: malformed dimension line");
  if (!std::getline(in, line) || line != "payload little-endian-f64")
    throw FormatError("checkpoint: malformed payload line");

  Checkpoint ck;
  auto& m = ck.model;
  m.config.n_factors = k;
  m.config.a = get_f64(in);
  m.config.b = get_f64(in);
  m.config.seed = get_u64(in);
  m.regression.c = get_f64(in);
  m.regression.sigma = get_f64(in);
  m.regression.eta.resize(k);
  for (int j = 0; j < k; ++j) m.regression.eta(j) = get_f64(in);
  ck.iterations = static_cast<std::int64_t>(get_u64(in));
  ck.final_elbo = get_f64(in);
  m.theta.shape = get_matrix(in, n, k);
  m.theta.rate = get_matrix(in, n, k);
  m.beta.shape = get_matrix(in, k, d);
  m.beta.rate = get_matrix(in, k, d);
  if (in.peek() != std::char_traits<char>::eof())
    throw FormatError("checkpoint: trailing bytes after payload");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  auto out = open_out(path, std::ios::binary);
  write_checkpoint(out, checkpoint);
  if (!out) throw FormatError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto in = open_in(path, std::ios::binary);
  try {
    return read_checkpoint(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void apply_config_json(const std::string& text, ModelConfig& model, FitConfig& fit) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  if (!doc.is_object()) throw FormatError("config: top level must be an object");
  try {
    for (const auto& [key, value] : doc.items()) {
      if (key == "n_factors") model.n_factors = value.get<int>();
      else if (key == "a") model.a = value.get<double>();
      else if (key == "b") model.b = value.get<double>();
      else if (key == "seed") model.seed = value.get<std::uint64_t>();
      else if (key == "max_iters") fit.max_iters = value.get<int>();
      else if (key == "rel_tol") fit.rel_tol = value.get<double>();
      else if (key == "eval_every") fit.eval_every = value.get<int>();
      else if (key == "mode") {
        const auto mode = value.get<std::string>();
        if (mode == "batch") fit.mode = FitMode::Batch;
        else if (mode == "svi") fit.mode = FitMode::Svi;
        else throw FormatError("config: mode must be \"batch\" or \"svi\", got \"" + mode + "\"");
      } else if (key == "schedule") {
        if (!value.is_object()) throw FormatError("config: schedule must be an object");
        for (const auto& [skey, svalue] : value.items()) {
          if (skey == "t0") fit.schedule.t0 = svalue.get<double>();
          else if (skey == "kappa") fit.schedule.kappa = svalue.get<double>();
          else if (skey == "batch_size") fit.schedule.batch_size = svalue.get<Index>();
          else if (skey == "local_max_iters") fit.schedule.local_max_iters = svalue.get<int>();
          else if (skey == "local_tol") fit.schedule.local_tol = svalue.get<double>();
          else throw FormatError("config: unknown schedule field \"" + skey + "\"");
        }
      } else {
        throw FormatError("config: unknown field \"" + key + "\"");
      }
    }
  } catch (const nlohmann::json::type_error& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
}

}  // namespace pfm::io
