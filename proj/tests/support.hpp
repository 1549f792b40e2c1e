#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "actadd/model.hpp"
#include "actadd/tokenizer.hpp"

namespace actadd::testing {

inline std::filesystem::path data_dir() { return ACTADD_TEST_DATA_DIR; }
inline std::filesystem::path oracle_dir() { return data_dir() / "oracle"; }
inline std::filesystem::path gpt2_dir() { return ACTADD_GPT2_DIR; }

inline nlohmann::json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing fixture " + path.string());
  return nlohmann::json::parse(in);
}

inline const BpeVocab& gpt2_vocab() {
  static const BpeVocab vocab = BpeVocab::load(gpt2_dir() / "vocab.json", gpt2_dir() / "merges.txt");
  return vocab;
}

inline const BpeVocab& toy_vocab() {
  static const BpeVocab vocab = BpeVocab::load(oracle_dir() / "toy_vocab.json", oracle_dir() / "toy_merges.txt");
  return vocab;
}

inline const Model& tiny_model() {
  static const Model model = load_model(oracle_dir() / "tiny_model.aawf");
  return model;
}

inline const Model& toy_model() {
  static const Model model = load_model(oracle_dir() / "toy_model.aawf");
  return model;
}

inline Matrix to_matrix(const nlohmann::json& rows) {
  Matrix m(rows.size(), rows.empty() ? 0 : rows[0].size());
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) m(r, c) = rows[r][c].get<float>();
  }
  return m;
}

inline std::vector<double> to_doubles(const nlohmann::json& values) { return values.get<std::vector<double>>(); }

inline double max_abs_diff(const Matrix& a, const nlohmann::json& rows) {
  double worst = 0.0;
  for (std::size_t r = 0; r < a.rows; ++r) {
    for (std::size_t c = 0; c < a.cols; ++c) {
      worst = std::max(worst, std::abs(static_cast<double>(a(r, c)) - rows[r][c].get<double>()));
    }
  }
  return worst;
}

// Random valid UTF-8 mixing ASCII, whitespace and multi-byte code points.
inline std::string random_utf8(std::mt19937& rng, std::size_t max_len) {
  std::uniform_int_distribution<int> len_dist(0, static_cast<int>(max_len));
  std::uniform_int_distribution<int> kind(0, 9);
  std::string out;
  const int n = len_dist(rng);
  for (int i = 0; i < n; ++i) {
    char32_t cp = 0;
    switch (kind(rng)) {
      case 0: cp = std::uniform_int_distribution<char32_t>(0x80, 0x7FF)(rng); break;
      case 1: cp = std::uniform_int_distribution<char32_t>(0x800, 0xD7FF)(rng); break;
      case 2: cp = std::uniform_int_distribution<char32_t>(0x10000, 0x10FFFF)(rng); break;
      case 3: cp = U" \t\n'"[std::uniform_int_distribution<int>(0, 3)(rng)]; break;
      default: cp = std::uniform_int_distribution<char32_t>(0x20, 0x7E)(rng); break;
    }
    if (cp < 0x80) {
      out += static_cast<char>(cp);
    } else if (cp < 0x800) {
      out += static_cast<char>(0xC0 | (cp >> 6));
      out += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
      out += static_cast<char>(0xE0 | (cp >> 12));
      out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
      out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
      out += static_cast<char>(0xF0 | (cp >> 18));
      out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
      out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
      out += static_cast<char>(0x80 | (cp & 0x3F));
    }
  }
  return out;
}

struct CommandResult {
  int exit_code = -1;
  std::string out;
};

// Runs a shell command, capturing stdout.
inline CommandResult run_command(const std::string& command) {
  CommandResult result;
  FILE* pipe = ::popen(command.c_str(), "r");
  if (!pipe) return result;
  char buf[4096];
  std::size_t n = 0;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) result.out.append(buf, n);
  const int status = ::pclose(pipe);
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return result;
}

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return out + "'";
}

inline std::string toy_cli() {
  return shell_quote(ACTADD_CLI_PATH) + " --model " + shell_quote((oracle_dir() / "toy_model.aawf").string()) +
         " --vocab " + shell_quote((oracle_dir() / "toy_vocab.json").string()) + " --merges " +
         shell_quote((oracle_dir() / "toy_merges.txt").string()) + " --workers 2";
}

}  // namespace actadd::testing
