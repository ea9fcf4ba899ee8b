#include "id2face/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "id2face/error.hpp"
#include "id2face/hash.hpp"

namespace id2face::config {

using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// TOML subset

class TomlParser {
 public:
  explicit TomlParser(const std::string& text) : text_(text) {}

  json parse() {
    json root = json::object();
    json* table = &root;
    while (pos_ < text_.size()) {
      skip_ws_and_comments();
      if (pos_ >= text_.size()) break;
      if (peek() == '\n') {
        advance_line();
        continue;
      }
      if (peek() == '[') {
        ++pos_;
        if (peek() == '[') fail("arrays of tables are not supported");
        auto path = parse_key_path(']');
        expect(']');
        table = &root;
        for (const auto& k : path) {
          if (!table->contains(k)) (*table)[k] = json::object();
          table = &(*table)[k];
          if (!table->is_object()) fail("key '" + k + "' is not a table");
        }
        end_of_line();
        continue;
      }
      auto path = parse_key_path('=');
      expect('=');
      skip_inline_ws();
      json value = parse_value();
      json* target = table;
      for (size_t i = 0; i + 1 < path.size(); ++i) {
        if (!target->contains(path[i])) (*target)[path[i]] = json::object();
        target = &(*target)[path[i]];
        if (!target->is_object()) fail("key '" + path[i] + "' is not a table");
      }
      if (target->contains(path.back())) fail("duplicate key '" + path.back() + "'");
      (*target)[path.back()] = std::move(value);
      end_of_line();
    }
    return root;
  }

 private:
  char peek() const { return pos_ < text_.size() ? text_[pos_] : '\0'; }

  [[noreturn]] void fail(const std::string& msg) const {
    const auto line = 1 + std::count(text_.begin(), text_.begin() + static_cast<std::ptrdiff_t>(pos_), '\n');
    throw ValidationError("TOML line " + std::to_string(line) + ": " + msg);
  }

  void expect(char c) {
    skip_inline_ws();
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  void skip_inline_ws() {
    while (peek() == ' ' || peek() == '\t' || peek() == '\r') ++pos_;
  }

  void skip_ws_and_comments() {
    skip_inline_ws();
    if (peek() == '#') {
      while (pos_ < text_.size() && peek() != '\n') ++pos_;
    }
  }

  void advance_line() {
    while (pos_ < text_.size() && peek() != '\n') ++pos_;
    if (pos_ < text_.size()) ++pos_;
  }

  void end_of_line() {
    skip_ws_and_comments();
    if (pos_ < text_.size() && peek() != '\n') fail("unexpected trailing characters");
    advance_line();
  }

  std::vector<std::string> parse_key_path(char terminator) {
    std::vector<std::string> path;
    while (true) {
      skip_inline_ws();
      if (peek() == '"') {
        path.push_back(parse_basic_string());
      } else {
        std::string key;
        while (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-') key += text_[pos_++];
        if (key.empty()) fail("expected a key");
        path.push_back(key);
      }
      skip_inline_ws();
      if (peek() == '.') {
        ++pos_;
        continue;
      }
      if (peek() != terminator) fail(std::string("expected '") + terminator + "'");
      return path;
    }
  }

  std::string parse_basic_string() {
    ++pos_;  // opening quote
    std::string out;
    while (true) {
      if (pos_ >= text_.size() || peek() == '\n') fail("unterminated string");
      char c = text_[pos_++];
      if (c == '"') return out;
      if (c != '\\') {
        out += c;
        continue;
      }
      char e = text_[pos_++];
      switch (e) {
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        case 'r': out += '\r'; break;
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        default: fail(std::string("unsupported escape \\") + e);
      }
    }
  }

  std::string parse_literal_string() {
    ++pos_;
    std::string out;
    while (peek() != '\'') {
      if (pos_ >= text_.size() || peek() == '\n') fail("unterminated string");
      out += text_[pos_++];
    }
    ++pos_;
    return out;
  }

  json parse_value() {
    const char c = peek();
    if (c == '"') return parse_basic_string();
    if (c == '\'') return parse_literal_string();
    if (c == '[') return parse_array();
    if (text_.compare(pos_, 4, "true") == 0) {
      pos_ += 4;
      return true;
    }
    if (text_.compare(pos_, 5, "false") == 0) {
      pos_ += 5;
      return false;
    }
    return parse_number();
  }

  json parse_array() {
    ++pos_;
    json arr = json::array();
    while (true) {
      skip_inline_ws();
      if (peek() == ']') {
        ++pos_;
        return arr;
      }
      arr.push_back(parse_value());
      skip_inline_ws();
      if (peek() == ',') {
        ++pos_;
        continue;
      }
      if (peek() != ']') fail("expected ',' or ']' in array");
    }
  }

  json parse_number() {
    std::string tok;
    while (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '+' || peek() == '-' || peek() == '.' ||
           peek() == '_')
      tok += text_[pos_++];
    std::string digits;
    for (char ch : tok)
      if (ch != '_') digits += ch;
    if (digits.empty()) fail("expected a value");
    const bool is_float = digits.find_first_of(".eE") != std::string::npos;
    try {
      size_t used = 0;
      if (is_float) {
        const double v = std::stod(digits, &used);
        if (used == digits.size()) return v;
      } else {
        const long long v = std::stoll(digits, &used, 10);
        if (used == digits.size()) return v;
      }
    } catch (const std::exception&) {
    }
    fail("invalid value '" + tok + "'");
  }

  const std::string& text_;
  size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Schema

void reject_unknown(const json& defaults, const json& given, const std::string& where) {
  if (!given.is_object()) throw ValidationError("config: '" + where + "' must be a table");
  for (const auto& [key, value] : given.items()) {
    const auto path = where.empty() ? key : where + "." + key;
    if (!defaults.contains(key)) throw ValidationError("config: unknown key '" + path + "'");
    if (defaults.at(key).is_object()) reject_unknown(defaults.at(key), value, path);
  }
}

uint64_t seed_from(const json& j, const char* key) {
  const auto& v = j.at(key);
  if (v.is_number_unsigned() || (v.is_number_integer() && v.get<int64_t>() >= 0)) return v.get<uint64_t>();
  throw ValidationError(std::string("config: ") + key + " must be a nonnegative integer");
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ValidationError("config: " + msg);
}

}  // namespace

json parse_toml(const std::string& text) { return TomlParser(text).parse(); }

json RunConfig::to_json() const {
  auto train_json = train.train.to_json();
  train_json["out"] = train.out;
  train_json["log"] = train.log;
  train_json["resume"] = train.resume;
  return {{"gen_data",
           {{"n_identities", gen_data.corpus.n_identities},
            {"renders_per_identity", gen_data.corpus.renders_per_identity},
            {"image_size", gen_data.corpus.image_size},
            {"seed", gen_data.corpus.seed},
            {"test_renders_per_identity", gen_data.test_renders_per_identity},
            {"out", gen_data.out},
            {"write_png", gen_data.write_png},
            {"overwrite", gen_data.overwrite}}},
          {"train", train_json},
          {"anonymize",
           {{"checkpoint", anonymize.checkpoint},
            {"input", anonymize.input},
            {"out", anonymize.out},
            {"steps", anonymize.steps},
            {"num_variants", anonymize.num_variants},
            {"seed", anonymize.seed},
            {"write_grid", anonymize.write_grid}}},
          {"evaluate",
           {{"originals", evaluate.originals},
            {"anonymized", evaluate.anonymized},
            {"out", evaluate.out},
            {"embeddings", evaluate.embeddings},
            {"residual_threshold", evaluate.residual_threshold},
            {"pairing", evaluate.pairing}}},
          {"sample_identity",
           {{"checkpoint", sample_identity.checkpoint},
            {"input", sample_identity.input},
            {"out", sample_identity.out},
            {"count", sample_identity.count},
            {"seed", sample_identity.seed}}}};
}

RunConfig RunConfig::from_json(const json& j) {
  const RunConfig defaults;
  json merged = defaults.to_json();
  reject_unknown(merged, j, "");
  merged.merge_patch(j);

  RunConfig c;
  try {
    const auto& g = merged.at("gen_data");
    c.gen_data.corpus.n_identities = g.at("n_identities").get<int>();
    c.gen_data.corpus.renders_per_identity = g.at("renders_per_identity").get<int>();
    c.gen_data.corpus.image_size = g.at("image_size").get<int>();
    c.gen_data.corpus.seed = seed_from(g, "seed");
    c.gen_data.test_renders_per_identity = g.at("test_renders_per_identity").get<int>();
    c.gen_data.out = g.at("out").get<std::string>();
    c.gen_data.write_png = g.at("write_png").get<bool>();
    c.gen_data.overwrite = g.at("overwrite").get<bool>();
    require(c.gen_data.corpus.n_identities >= 1, "gen_data.n_identities must be >= 1");
    require(c.gen_data.corpus.renders_per_identity >= 1, "gen_data.renders_per_identity must be >= 1");
    require(c.gen_data.corpus.image_size >= 8 && c.gen_data.corpus.image_size % 8 == 0,
            "gen_data.image_size must be a positive multiple of 8");
    require(c.gen_data.test_renders_per_identity >= 0, "gen_data.test_renders_per_identity must be >= 0");

    auto t = merged.at("train");
    seed_from(t, "seed");
    c.train.out = t.at("out").get<std::string>();
    c.train.log = t.at("log").get<std::string>();
    c.train.resume = t.at("resume").get<std::string>();
    t.erase("out");
    t.erase("log");
    t.erase("resume");
    c.train.train = pipeline::TrainConfig::from_json(t);

    const auto& a = merged.at("anonymize");
    c.anonymize.checkpoint = a.at("checkpoint").get<std::string>();
    c.anonymize.input = a.at("input").get<std::string>();
    c.anonymize.out = a.at("out").get<std::string>();
    c.anonymize.steps = a.at("steps").get<int64_t>();
    c.anonymize.num_variants = a.at("num_variants").get<int64_t>();
    c.anonymize.seed = seed_from(a, "seed");
    c.anonymize.write_grid = a.at("write_grid").get<bool>();
    require(c.anonymize.steps >= 1, "anonymize.steps must be >= 1");
    require(c.anonymize.num_variants >= 1, "anonymize.num_variants must be >= 1");

    const auto& e = merged.at("evaluate");
    c.evaluate.originals = e.at("originals").get<std::string>();
    c.evaluate.anonymized = e.at("anonymized").get<std::string>();
    c.evaluate.out = e.at("out").get<std::string>();
    c.evaluate.embeddings = e.at("embeddings").get<std::string>();
    c.evaluate.residual_threshold = e.at("residual_threshold").get<double>();
    c.evaluate.pairing = e.at("pairing").get<std::string>();
    require(c.evaluate.residual_threshold > 0, "evaluate.residual_threshold must be positive");
    require(c.evaluate.pairing == "centroid" || c.evaluate.pairing == "nearest",
            "evaluate.pairing must be 'centroid' or 'nearest'");

    const auto& s = merged.at("sample_identity");
    c.sample_identity.checkpoint = s.at("checkpoint").get<std::string>();
    c.sample_identity.input = s.at("input").get<std::string>();
    c.sample_identity.out = s.at("out").get<std::string>();
    c.sample_identity.count = s.at("count").get<int64_t>();
    c.sample_identity.seed = seed_from(s, "seed");
    require(c.sample_identity.count >= 1, "sample_identity.count must be >= 1");
  } catch (const json::exception& ex) {
    throw ValidationError(std::string("config: ") + ex.what());
  }
  return c;
}

std::string RunConfig::hash() const { return sha256_hex(to_json().dump()); }

RunConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  json j;
  if (path.extension() == ".toml") {
    j = parse_toml(ss.str());
  } else {
    try {
      j = json::parse(ss.str());
    } catch (const json::parse_error& e) {
      throw ValidationError("config " + path.string() + ": " + e.what());
    }
  }
  return RunConfig::from_json(j);
}

}  // namespace id2face::config
