#include "keycomp/keywords.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unistd.h>
#include <unordered_set>

#include "keycomp/digest.hpp"
#include "keycomp/error.hpp"

namespace keycomp {

namespace {

bool is_ascii_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_ascii_punct(char c) {
  const auto u = static_cast<unsigned char>(c);
  return u < 0x80 && std::ispunct(u) != 0;
}

std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

bool has_vowel(std::string_view s) { return s.find_first_of("aeiouy") != std::string_view::npos; }

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

bool is_consonant(char c) { return c >= 'a' && c <= 'z' && std::string_view("aeiou").find(c) == std::string_view::npos; }

// U+2019 RIGHT SINGLE QUOTATION MARK used as an apostrophe.
std::string normalize_apostrophes(std::string s) {
  static constexpr std::string_view kCurly = "\xE2\x80\x99";
  for (auto pos = s.find(kCurly); pos != std::string::npos; pos = s.find(kCurly, pos + 1)) {
    s.replace(pos, kCurly.size(), "'");
  }
  return s;
}

std::unordered_map<std::string, Pos> parse_lexicon(std::string_view text, const std::string& origin) {
  std::unordered_map<std::string, Pos> lexicon;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos || tab == 0) {
      throw ParseError(fmt::format("{}:{}: expected word<TAB>TAG", origin, line_no), line_no);
    }
    const std::string word = ascii_lower(line.substr(0, tab));
    Pos tag;
    try {
      tag = parse_pos(line.substr(tab + 1));
    } catch (const ConfigError& e) {
      throw ParseError(fmt::format("{}:{}: {}", origin, line_no, e.what()), line_no);
    }
    auto [it, inserted] = lexicon.emplace(word, tag);
    if (!inserted && it->second != tag) {
      throw ParseError(fmt::format("{}:{}: '{}' listed with two different tags", origin, line_no, word), line_no);
    }
  }
  return lexicon;
}

}  // namespace

std::string_view to_string(Pos pos) {
  switch (pos) {
    case Pos::Noun: return "NOUN";
    case Pos::Verb: return "VERB";
    case Pos::Adp: return "ADP";
    case Pos::Adj: return "ADJ";
    case Pos::Other: return "OTHER";
  }
  return "OTHER";
}

Pos parse_pos(std::string_view tag) {
  for (Pos p : {Pos::Noun, Pos::Verb, Pos::Adp, Pos::Adj, Pos::Other}) {
    if (tag == to_string(p)) return p;
  }
  throw ConfigError(fmt::format("unknown part-of-speech tag '{}'", tag));
}

std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> tokens;
  auto emit = [&](std::size_t b, std::size_t e) {
    tokens.push_back(Token{std::string(text.substr(b, e - b)), b, e});
  };
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_ascii_space(text[i])) ++i;
    std::size_t b = i;
    while (i < text.size() && !is_ascii_space(text[i])) ++i;
    std::size_t e = i;
    if (b == e) continue;

    while (b < e && is_ascii_punct(text[b])) {
      emit(b, b + 1);
      ++b;
    }
    std::size_t core_end = e;
    while (core_end > b && is_ascii_punct(text[core_end - 1])) --core_end;
    if (b < core_end) emit(b, core_end);
    for (std::size_t p = core_end; p < e; ++p) emit(p, p + 1);
  }
  return tokens;
}

ReferenceTagger::ReferenceTagger()
    : ReferenceTagger(from_text(embedded_lexicon(), "reference")) {}

ReferenceTagger::ReferenceTagger(std::unordered_map<std::string, Pos> lexicon, std::string name)
    : lexicon_(std::move(lexicon)), name_(std::move(name)) {}

ReferenceTagger ReferenceTagger::from_text(std::string_view lexicon_text, std::string name) {
  auto lexicon = parse_lexicon(lexicon_text, name);
  // The lexicon digest doubles as the backend version.
  std::string versioned = fmt::format("{}@{}", name, sha256_hex(lexicon_text).substr(0, 12));
  return ReferenceTagger(std::move(lexicon), std::move(versioned));
}

ReferenceTagger ReferenceTagger::from_file(const std::filesystem::path& lexicon_path) {
  return from_text(read_file(lexicon_path), lexicon_path.filename().string());
}

const Pos* ReferenceTagger::lookup(const std::string& word) const {
  auto it = lexicon_.find(word);
  return it == lexicon_.end() ? nullptr : &it->second;
}

bool ReferenceTagger::is_lexicon_adjective(const std::string& word) const {
  const Pos* p = lookup(word);
  return p != nullptr && *p == Pos::Adj;
}

std::optional<Pos> ReferenceTagger::lookup_inflected(const std::string& w) const {
  if (!ends_with(w, "s") || ends_with(w, "ss") || w.size() < 3) return std::nullopt;
  std::vector<std::string> stems;
  if (ends_with(w, "ies") && w.size() > 4) stems.push_back(w.substr(0, w.size() - 3) + "y");
  if (ends_with(w, "es")) stems.push_back(w.substr(0, w.size() - 2));
  stems.push_back(w.substr(0, w.size() - 1));
  for (const auto& stem : stems) {
    const Pos* p = lookup(stem);
    if (p != nullptr && (*p == Pos::Noun || *p == Pos::Verb)) return *p;
  }
  return std::nullopt;
}

Pos ReferenceTagger::tag_word(std::string_view surface) const {
  std::string w = normalize_apostrophes(ascii_lower(surface));
  if (w.empty()) return Pos::Other;
  if (std::all_of(w.begin(), w.end(), [](char c) { return is_ascii_punct(c); })) return Pos::Other;
  if (std::any_of(w.begin(), w.end(), [](char c) { return c >= '0' && c <= '9'; }) &&
      std::none_of(w.begin(), w.end(), [](char c) { return c >= 'a' && c <= 'z'; })) {
    return Pos::Other;
  }

  if (const Pos* p = lookup(w)) return *p;
  if (ends_with(w, "'s") && w.size() > 2) {
    return tag_word(std::string_view(w).substr(0, w.size() - 2));
  }
  if (auto p = lookup_inflected(w)) return *p;

  // Comparative and superlative forms of listed adjectives: faster, bigger, larger, happier.
  for (std::string_view suffix : {std::string_view("er"), std::string_view("est")}) {
    if (!ends_with(w, suffix) || w.size() < suffix.size() + 2) continue;
    const std::string stem = w.substr(0, w.size() - suffix.size());
    std::vector<std::string> candidates{stem, stem + "e"};
    if (stem.size() >= 2 && stem[stem.size() - 1] == stem[stem.size() - 2] && is_consonant(stem.back())) {
      candidates.push_back(stem.substr(0, stem.size() - 1));
    }
    if (stem.back() == 'i') candidates.push_back(stem.substr(0, stem.size() - 1) + "y");
    for (const auto& c : candidates) {
      if (is_lexicon_adjective(c)) return Pos::Adj;
    }
  }

  if (ends_with(w, "ing") && w.size() >= 5 && has_vowel(std::string_view(w).substr(0, w.size() - 3))) {
    return Pos::Verb;
  }
  if (ends_with(w, "ed") && w.size() >= 4 && has_vowel(std::string_view(w).substr(0, w.size() - 2))) {
    return Pos::Verb;
  }
  if (ends_with(w, "ly") && w.size() >= 4 && has_vowel(std::string_view(w).substr(0, w.size() - 2))) {
    return Pos::Other;
  }
  return Pos::Noun;
}

std::vector<Pos> ReferenceTagger::tag(std::span<const Token> tokens) const {
  std::vector<Pos> tags;
  tags.reserve(tokens.size());
  for (const auto& t : tokens) tags.push_back(tag_word(t.surface));
  return tags;
}

ExternalProcessTagger::ExternalProcessTagger(std::string command) : command_(std::move(command)) {
  if (command_.empty()) throw ConfigError("external tagger: empty command");
}

std::vector<Pos> ExternalProcessTagger::tag(std::span<const Token> tokens) const {
  if (tokens.empty()) return {};

  char path_template[] = "/tmp/keycomp-tokens-XXXXXX";
  const int fd = ::mkstemp(path_template);
  if (fd < 0) throw Error("external tagger: cannot create temporary file");
  ::close(fd);
  const std::filesystem::path input_path(path_template);
  struct Cleanup {
    std::filesystem::path path;
    ~Cleanup() {
      std::error_code ec;
      std::filesystem::remove(path, ec);
    }
  } cleanup{input_path};

  {
    std::ofstream out(input_path, std::ios::binary);
    for (const auto& t : tokens) out << t.surface << '\n';
    if (!out) throw Error("external tagger: cannot write token file");
  }

  const std::string cmd = "( " + command_ + " ) < '" + input_path.string() + "'";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (pipe == nullptr) throw Error("external tagger: cannot start '" + command_ + "'");
  std::string output;
  std::array<char, 4096> buf{};
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) output.append(buf.data(), n);
  const int status = ::pclose(pipe);
  if (status != 0) throw Error(fmt::format("external tagger '{}' exited with status {}", command_, status));

  std::vector<Pos> tags;
  std::istringstream in(output);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    tags.push_back(parse_pos(line));
  }
  if (tags.size() != tokens.size()) {
    throw Error(fmt::format("external tagger returned {} tags for {} tokens", tags.size(), tokens.size()));
  }
  return tags;
}

std::shared_ptr<const Tagger> make_tagger(std::string_view backend, std::string_view argument) {
  if (backend == "reference") {
    if (argument.empty()) return std::make_shared<const ReferenceTagger>();
    return std::make_shared<const ReferenceTagger>(ReferenceTagger::from_file(std::filesystem::path(argument)));
  }
  if (backend == "external") return std::make_shared<const ExternalProcessTagger>(std::string(argument));
  throw ConfigError(fmt::format("unknown tagger backend '{}' (known: reference, external)", backend));
}

std::vector<TaggedToken> tag_pos(std::span<const Token> tokens, const Tagger& tagger) {
  const std::vector<Pos> tags = tagger.tag(tokens);
  if (tags.size() != tokens.size()) throw Error("tagger returned a tag count different from the token count");
  std::vector<TaggedToken> out;
  out.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) out.push_back({tokens[i], tags[i]});
  return out;
}

bool is_auxiliary(std::string_view w) {
  static const std::unordered_set<std::string_view> kAux = {
      "is",     "are",      "am",      "be",      "been",     "being",   "was",      "were",
      "do",     "does",     "did",     "will",    "would",    "can",     "could",    "shall",
      "should", "may",      "might",   "must",    "isn't",    "aren't",  "wasn't",   "weren't",
      "don't",  "doesn't",  "didn't",  "can't",   "cannot",   "couldn't", "won't",   "wouldn't",
      "shouldn't", "hasn't", "haven't", "hadn't", "mustn't",  "ain't",
  };
  return kAux.contains(w);
}

KeywordSet extract_keywords(std::span<const std::string> captions, const Tagger& tagger) {
  if (captions.empty() || captions.size() > 2) {
    throw ValidationError(fmt::format("extract_keywords expects 1 or 2 captions, got {}", captions.size()));
  }
  std::string text = captions[0];
  if (captions.size() == 2) {
    text += ' ';
    text += captions[1];
  }

  KeywordSet set;
  set.source = captions.size() == 2 ? KeywordSource::ConcatenatedCaptions : KeywordSource::SingleCaption;
  const auto tokens = tokenize(text);
  std::unordered_set<std::string> seen;
  for (const auto& tagged : tag_pos(tokens, tagger)) {
    if (!is_content(tagged.pos)) continue;
    std::string word = normalize_apostrophes(ascii_lower(tagged.token.surface));
    if (is_auxiliary(word)) continue;
    if (seen.insert(word).second) set.words.push_back(std::move(word));
  }
  return set;
}

}  // namespace keycomp
