#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace keycomp {

/// A slice of the input text; `start`/`end` are byte offsets.
struct Token {
  std::string surface;
  std::size_t start = 0;
  std::size_t end = 0;

  bool operator==(const Token&) const = default;
};

/// Coarse part of speech. ADP covers prepositions.
enum class Pos { Noun, Verb, Adp, Adj, Other };

std::string_view to_string(Pos pos);
/// Accepts NOUN, VERB, ADP, ADJ, OTHER. Throws ConfigError otherwise.
Pos parse_pos(std::string_view tag);
inline bool is_content(Pos pos) { return pos != Pos::Other; }

struct TaggedToken {
  Token token;
  Pos pos = Pos::Other;

  bool operator==(const TaggedToken&) const = default;
};

enum class KeywordSource { SingleCaption, ConcatenatedCaptions };

/// Lowercased, de-duplicated content words in order of first appearance.
struct KeywordSet {
  std::vector<std::string> words;
  KeywordSource source = KeywordSource::SingleCaption;

  bool operator==(const KeywordSet&) const = default;
};

/// Splits on ASCII whitespace, then peels leading and trailing ASCII
/// punctuation off each chunk as one-character tokens. Internal punctuation
/// ("truck's", "t-shirt") stays inside the word.
std::vector<Token> tokenize(std::string_view text);

class Tagger {
 public:
  virtual ~Tagger() = default;
  /// Backend name plus version; part of every determinism guarantee.
  virtual std::string name() const = 0;
  /// One tag per token, same order.
  virtual std::vector<Pos> tag(std::span<const Token> tokens) const = 0;
};

/// Closed-lexicon tagger with suffix fallbacks. Lookup order for a lowercased
/// word: punctuation/digits -> OTHER; possessive "'s" stripped; exact lexicon
/// entry; plural/3rd-person stem found in the lexicon; comparative or
/// superlative of a lexicon adjective -> ADJ; -ing/-ed -> VERB; -ly -> OTHER;
/// anything else -> NOUN.
class ReferenceTagger final : public Tagger {
 public:
  /// The lexicon compiled into the library.
  ReferenceTagger();
  /// `word<TAB>TAG` per line; '#' starts a comment. Throws LoadError / ParseError.
  static ReferenceTagger from_file(const std::filesystem::path& lexicon_path);
  static ReferenceTagger from_text(std::string_view lexicon_text, std::string name);

  std::string name() const override { return name_; }
  std::vector<Pos> tag(std::span<const Token> tokens) const override;

  /// Tag for a single word, no context.
  Pos tag_word(std::string_view word) const;
  std::size_t lexicon_size() const { return lexicon_.size(); }

 private:
  ReferenceTagger(std::unordered_map<std::string, Pos> lexicon, std::string name);
  const Pos* lookup(const std::string& word) const;
  std::optional<Pos> lookup_inflected(const std::string& word) const;
  bool is_lexicon_adjective(const std::string& word) const;

  std::unordered_map<std::string, Pos> lexicon_;
  std::string name_;
};

/// Delegates to an external program (e.g. a wrapper around a statistical NLP
/// toolkit). The command receives one token per line on stdin and must print
/// exactly one coarse tag per line on stdout.
class ExternalProcessTagger final : public Tagger {
 public:
  explicit ExternalProcessTagger(std::string command);
  std::string name() const override { return "external:" + command_; }
  std::vector<Pos> tag(std::span<const Token> tokens) const override;

 private:
  std::string command_;
};

/// Registered backends: "reference" (optional `argument` = lexicon override
/// path) and "external" (`argument` = command line). Throws ConfigError.
std::shared_ptr<const Tagger> make_tagger(std::string_view backend, std::string_view argument = {});

std::vector<TaggedToken> tag_pos(std::span<const Token> tokens, const Tagger& tagger);

/// Copulas and auxiliaries never become keywords even though they tag VERB.
bool is_auxiliary(std::string_view lowercase_word);

/// One caption (image task) or two captions joined by a single space (text task).
KeywordSet extract_keywords(std::span<const std::string> captions, const Tagger& tagger);

/// Built-in lexicon text, `word<TAB>TAG` lines.
std::string_view embedded_lexicon();

}  // namespace keycomp
