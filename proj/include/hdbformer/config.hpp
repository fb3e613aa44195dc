#pragma once

#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "hdbformer/train.hpp"

namespace hdbf {

/// Scalar or single-line array value of the supported TOML subset.
struct TomlValue {
  std::variant<std::int64_t, double, bool, std::string, std::vector<TomlValue>> v;
};

/// Flat view of a TOML document: "table.sub.key" → value.
class TomlDoc {
 public:
  static TomlDoc parse(const std::string& text) {
    TomlDoc doc;
    std::istringstream in(text);
    std::string line, table;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      Cursor c{line, 0, lineno};
      c.skip_ws();
      if (c.done() || c.peek() == '#') continue;
      if (c.peek() == '[') {
        ++c.pos;
        if (!c.done() && c.peek() == '[') c.fail("arrays of tables are not supported");
        table = c.dotted_key();
        c.skip_ws();
        c.expect(']');
        c.end_of_line();
        if (!doc.tables_.insert(table).second) c.fail("duplicate table [" + table + "]");
        continue;
      }
      const std::string key = c.dotted_key();
      c.skip_ws();
      c.expect('=');
      c.skip_ws();
      TomlValue value = c.value();
      c.end_of_line();
      const std::string full = table.empty() ? key : table + "." + key;
      if (doc.values_.count(full)) c.fail("duplicate key " + full);
      doc.values_[full] = std::move(value);
    }
    return doc;
  }

  static TomlDoc load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, TomlValue>& values() const { return values_; }

  /// Typed accessors; each marks the key as consumed.
  bool get_bool(const std::string& key, bool def) const {
    return take<bool>(key, def, "a boolean");
  }
  std::string get_string(const std::string& key, const std::string& def) const {
    return take<std::string>(key, def, "a string");
  }
  std::int64_t get_int(const std::string& key, std::int64_t def) const {
    return take<std::int64_t>(key, def, "an integer");
  }
  std::size_t get_size(const std::string& key, std::size_t def) const {
    const std::int64_t v = get_int(key, static_cast<std::int64_t>(def));
    if (v < 0) throw ConfigError(key + " must be non-negative");
    return static_cast<std::size_t>(v);
  }
  double get_double(const std::string& key, double def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    used_.insert(key);
    if (auto* d = std::get_if<double>(&it->second.v)) return *d;
    if (auto* i = std::get_if<std::int64_t>(&it->second.v)) return static_cast<double>(*i);
    throw ConfigError(key + " must be a number");
  }

  /// Throws ConfigError naming the first key no accessor consumed.
  void reject_unknown() const {
    for (const auto& [k, _] : values_)
      if (!used_.count(k)) throw ConfigError("unknown config key: " + k);
  }

 private:
  struct Cursor {
    const std::string& s;
    std::size_t pos;
    std::size_t line;

    bool done() const { return pos >= s.size(); }
    char peek() const { return s[pos]; }
    [[noreturn]] void fail(const std::string& msg) const {
      throw ConfigError("config line " + std::to_string(line) + ": " + msg);
    }
    void skip_ws() {
      while (!done() && (s[pos] == ' ' || s[pos] == '\t' || s[pos] == '\r')) ++pos;
    }
    void expect(char ch) {
      if (done() || s[pos] != ch) fail(std::string("expected '") + ch + "'");
      ++pos;
    }
    void end_of_line() {
      skip_ws();
      if (!done() && s[pos] != '#') fail("unexpected trailing text");
    }
    std::string bare_key() {
      const std::size_t start = pos;
      while (!done() && (std::isalnum(static_cast<unsigned char>(s[pos])) || s[pos] == '_' ||
                         s[pos] == '-'))
        ++pos;
      if (pos == start) fail("expected a key");
      return s.substr(start, pos - start);
    }
    std::string dotted_key() {
      skip_ws();
      std::string k = bare_key();
      skip_ws();
      while (!done() && s[pos] == '.') {
        ++pos;
        skip_ws();
        k += "." + bare_key();
        skip_ws();
      }
      return k;
    }
    TomlValue value() {
      if (done()) fail("missing value");
      const char ch = s[pos];
      if (ch == '"') return {string_value()};
      if (ch == '[') {
        ++pos;
        std::vector<TomlValue> items;
        skip_ws();
        while (!done() && s[pos] != ']') {
          items.push_back(value());
          skip_ws();
          if (!done() && s[pos] == ',') {
            ++pos;
            skip_ws();
          }
        }
        expect(']');
        return {std::move(items)};
      }
      if (s.compare(pos, 4, "true") == 0) {
        pos += 4;
        return {true};
      }
      if (s.compare(pos, 5, "false") == 0) {
        pos += 5;
        return {false};
      }
      return number();
    }
    std::string string_value() {
      ++pos;
      std::string out;
      while (!done() && s[pos] != '"') {
        if (s[pos] == '\\') {
          ++pos;
          if (done()) fail("unterminated escape");
          switch (s[pos]) {
            case 'n': out += '\n'; break;
            case 't': out += '\t'; break;
            case '"': out += '"'; break;
            case '\\': out += '\\'; break;
            default: fail("unsupported escape");
          }
        } else {
          out += s[pos];
        }
        ++pos;
      }
      expect('"');
      return out;
    }
    TomlValue number() {
      const std::size_t start = pos;
      while (!done() && (std::isalnum(static_cast<unsigned char>(s[pos])) || s[pos] == '+' ||
                         s[pos] == '-' || s[pos] == '.' || s[pos] == '_'))
        ++pos;
      std::string tok;
      for (std::size_t i = start; i < pos; ++i)
        if (s[i] != '_') tok += s[i];
      if (tok.empty()) fail("expected a value");
      const bool is_float = tok.find_first_of(".eE") != std::string::npos &&
                            tok.find("0x") == std::string::npos;
      try {
        std::size_t used = 0;
        if (is_float) {
          const double d = std::stod(tok, &used);
          if (used == tok.size()) return {d};
        } else {
          const long long i = std::stoll(tok, &used, 10);
          if (used == tok.size()) return {static_cast<std::int64_t>(i)};
        }
      } catch (const std::exception&) {
      }
      fail("invalid value '" + tok + "'");
    }
  };

  template <typename V>
  V take(const std::string& key, const V& def, const char* what) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    used_.insert(key);
    if (auto* p = std::get_if<V>(&it->second.v)) return *p;
    throw ConfigError(key + " must be " + what);
  }

  std::map<std::string, TomlValue> values_;
  std::set<std::string> tables_;
  mutable std::set<std::string> used_;
};

/// Reads [model], [model.encoder], [model.miim]; absent keys keep defaults.
inline ModelConfig model_config_from(const TomlDoc& d, ModelConfig m = {}) {
  m.num_classes = d.get_size("model.num_classes", m.num_classes);
  const std::string fusion = d.get_string("model.fusion_kind", fusion_kind_name(m.fusion_kind));
  if (fusion == "miim") m.fusion_kind = FusionKind::miim;
  else if (fusion == "naive_add_mul") m.fusion_kind = FusionKind::naive_add_mul;
  else throw ConfigError("model.fusion_kind must be miim or naive_add_mul, got " + fusion);

  auto& e = m.encoder;
  e.base_channels = d.get_size("model.encoder.base_channels", e.base_channels);
  e.input_h = d.get_size("model.encoder.input_h", e.input_h);
  e.input_w = d.get_size("model.encoder.input_w", e.input_w);
  const std::string kind = d.get_string("model.encoder.depth_encoder_kind",
                                        depth_encoder_name(e.depth_encoder_kind));
  if (kind == "ldformer") e.depth_encoder_kind = DepthEncoderKind::ldformer;
  else if (kind == "ordinary_conv") e.depth_encoder_kind = DepthEncoderKind::ordinary_conv;
  else throw ConfigError("model.encoder.depth_encoder_kind must be ldformer or ordinary_conv");
  e.base_branch_enabled = d.get_bool("model.encoder.base_branch_enabled", e.base_branch_enabled);
  e.detail_window = d.get_size("model.encoder.detail_window", e.detail_window);
  e.detail_heads = d.get_size("model.encoder.detail_heads", e.detail_heads);

  auto& q = m.miim;
  q.iterations = static_cast<int>(d.get_int("model.miim.iterations", q.iterations));
  q.enable_gfa1 = d.get_bool("model.miim.enable_gfa1", q.enable_gfa1);
  q.enable_lfa1 = d.get_bool("model.miim.enable_lfa1", q.enable_lfa1);
  q.enable_gfa2 = d.get_bool("model.miim.enable_gfa2", q.enable_gfa2);
  q.enable_lfa2 = d.get_bool("model.miim.enable_lfa2", q.enable_lfa2);
  q.pooling_enabled = d.get_bool("model.miim.pooling_enabled", q.pooling_enabled);
  q.q_concat_enabled = d.get_bool("model.miim.q_concat_enabled", q.q_concat_enabled);
  q.heads = d.get_size("model.miim.heads", q.heads);
  q.kernel = d.get_size("model.miim.kernel", q.kernel);
  m.validate();
  return m;
}

/// Reads [train]; absent keys keep defaults.
inline TrainConfig train_config_from(const TomlDoc& d, TrainConfig t = {}) {
  t.batch_size = d.get_size("train.batch_size", t.batch_size);
  t.lr0 = d.get_double("train.lr0", t.lr0);
  t.weight_decay = d.get_double("train.weight_decay", t.weight_decay);
  t.total_steps = d.get_size("train.total_steps", t.total_steps);
  t.poly_power = d.get_double("train.poly_power", t.poly_power);
  t.seed = static_cast<std::uint64_t>(d.get_size("train.seed", t.seed));
  t.dataset_size = d.get_size("train.dataset_size", t.dataset_size);
  t.eval_every = d.get_size("train.eval_every", t.eval_every);
  t.eval_scenes = d.get_size("train.eval_scenes", t.eval_scenes);
  t.augment = d.get_bool("train.augment", t.augment);
  t.validate();
  return t;
}

/// Shortest round-trip form, always recognisable as a float.
inline std::string toml_float(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, res.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

inline std::string to_toml(const ModelConfig& m, const TrainConfig& t) {
  std::ostringstream o;
  auto b = [](bool v) { return v ? "true" : "false"; };
  o << "[model]\n"
    << "num_classes = " << m.num_classes << "\n"
    << "fusion_kind = \"" << fusion_kind_name(m.fusion_kind) << "\"\n\n"
    << "[model.encoder]\n"
    << "base_channels = " << m.encoder.base_channels << "\n"
    << "input_h = " << m.encoder.input_h << "\n"
    << "input_w = " << m.encoder.input_w << "\n"
    << "depth_encoder_kind = \"" << depth_encoder_name(m.encoder.depth_encoder_kind) << "\"\n"
    << "base_branch_enabled = " << b(m.encoder.base_branch_enabled) << "\n"
    << "detail_window = " << m.encoder.detail_window << "\n"
    << "detail_heads = " << m.encoder.detail_heads << "\n\n"
    << "[model.miim]\n"
    << "iterations = " << m.miim.iterations << "\n"
    << "enable_gfa1 = " << b(m.miim.enable_gfa1) << "\n"
    << "enable_lfa1 = " << b(m.miim.enable_lfa1) << "\n"
    << "enable_gfa2 = " << b(m.miim.enable_gfa2) << "\n"
    << "enable_lfa2 = " << b(m.miim.enable_lfa2) << "\n"
    << "pooling_enabled = " << b(m.miim.pooling_enabled) << "\n"
    << "q_concat_enabled = " << b(m.miim.q_concat_enabled) << "\n"
    << "heads = " << m.miim.heads << "\n"
    << "kernel = " << m.miim.kernel << "\n\n"
    << "[train]\n"
    << "batch_size = " << t.batch_size << "\n"
    << "lr0 = " << toml_float(t.lr0) << "\n"
    << "weight_decay = " << toml_float(t.weight_decay) << "\n"
    << "total_steps = " << t.total_steps << "\n"
    << "poly_power = " << toml_float(t.poly_power) << "\n"
    << "seed = " << t.seed << "\n"
    << "dataset_size = " << t.dataset_size << "\n"
    << "eval_every = " << t.eval_every << "\n"
    << "eval_scenes = " << t.eval_scenes << "\n"
    << "augment = " << b(t.augment) << "\n";
  return o.str();
}

}  // namespace hdbf
