#include "ipat/text.hpp"

#include <unicode/locid.h>
#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include <cstdio>

#include "ipat/error.hpp"

namespace ipat::text {

namespace {

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

icu::UnicodeString to_icu(std::u32string_view s) {
  return icu::UnicodeString::fromUTF32(reinterpret_cast<const UChar32*>(s.data()),
                                       static_cast<int32_t>(s.size()));
}

std::u32string from_icu(const icu::UnicodeString& u) {
  UErrorCode status = U_ZERO_ERROR;
  std::u32string out(static_cast<std::size_t>(u.countChar32()), U'\0');
  u.toUTF32(reinterpret_cast<UChar32*>(out.data()), static_cast<int32_t>(out.size()), status);
  if (U_FAILURE(status)) fail(ErrorCode::ParseError, "UTF-32 conversion failed");
  return out;
}

}  // namespace

std::u32string utf8_to_u32(std::string_view s) {
  std::u32string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    int len = 0;
    char32_t cp = 0;
    if (b0 < 0x80) {
      len = 1;
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
      len = 4;
      cp = b0 & 0x07;
    } else {
      fail(ErrorCode::ParseError, "invalid UTF-8 lead byte at offset " + std::to_string(i));
    }
    if (i + len > s.size()) fail(ErrorCode::ParseError, "truncated UTF-8 sequence");
    for (int k = 1; k < len; ++k) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b & 0xC0) != 0x80) fail(ErrorCode::ParseError, "invalid UTF-8 continuation byte");
      cp = (cp << 6) | (b & 0x3F);
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

std::string u32_to_utf8(std::u32string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char32_t cp : s) append_utf8(out, cp);
  return out;
}

std::string codepoint_to_utf8(char32_t cp) {
  std::string out;
  append_utf8(out, cp);
  return out;
}

std::u32string nfd(std::u32string_view s) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* norm = icu::Normalizer2::getNFDInstance(status);
  if (U_FAILURE(status)) fail(ErrorCode::ParseError, "ICU NFD normalizer unavailable");
  icu::UnicodeString result = norm->normalize(to_icu(s), status);
  if (U_FAILURE(status)) fail(ErrorCode::ParseError, "NFD normalization failed");
  return from_icu(result);
}

std::string nfd(std::string_view s) { return u32_to_utf8(nfd(utf8_to_u32(s))); }

std::string to_lower(std::string_view s) {
  icu::UnicodeString u = to_icu(utf8_to_u32(s));
  u.toLower(icu::Locale::getRoot());
  return u32_to_utf8(from_icu(u));
}

bool is_space(char32_t cp) noexcept { return u_isUWhiteSpace(static_cast<UChar32>(cp)) != 0; }

std::vector<std::string> split_whitespace(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char32_t cp : utf8_to_u32(s)) {
    if (is_space(cp)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      append_utf8(cur, cp);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string_view trim(std::string_view s) {
  const char* ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

std::u32string Normalizer::default_punctuation() {
  return U"!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~¡«»¿–—‘’"
         U"‚“”„…";
}

std::string Normalizer::apply(std::string_view s) const {
  std::u32string in = utf8_to_u32(lowercase ? to_lower(s) : std::string(s));
  std::string out;
  bool pending_space = false;
  for (char32_t cp : in) {
    if (punctuation.find(cp) != std::u32string::npos) continue;
    if (is_space(cp)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    append_utf8(out, cp);
  }
  return out;
}

std::string Normalizer::describe() const {
  std::string d = lowercase ? "lowercase=1" : "lowercase=0";
  d += ";strip=";
  for (char32_t cp : punctuation) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04X,", static_cast<unsigned>(cp));
    d += buf;
  }
  if (!punctuation.empty()) d.pop_back();
  return d;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) noexcept {
  std::uint64_t h = seed;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace ipat::text
