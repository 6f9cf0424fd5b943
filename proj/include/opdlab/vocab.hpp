// Fixed 64-token vocabulary shared by the scene serializer, the policy, and
// the checkpoints. Ids are stable by construction and recorded in checkpoint
// headers; answer tokens (colors, glyphs, digits) form one contiguous band.

#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace opdlab {

struct Vocabulary {
    // special tokens
    static constexpr int PAD = 0;
    static constexpr int BOS = 1;
    static constexpr int EOS = 2;
    static constexpr int BOX_OPEN = 3;
    static constexpr int BOX_CLOSE = 4;
    // attribute bands
    static constexpr int COLOR0 = 5;
    static constexpr int kNumColors = 8;
    static constexpr int GLYPH0 = 13;
    static constexpr int kNumGlyphs = 10;
    static constexpr int DIGIT0 = 23;
    static constexpr int kNumDigits = 10;
    // question words
    static constexpr int Q_COLOR = 33;  // "what color"
    static constexpr int Q_GLYPH = 34;  // "what glyph"
    static constexpr int Q_COUNT = 35;  // "how many"
    static constexpr int AT = 36;
    static constexpr int OF = 37;
    static constexpr int ONLY = 38;
    static constexpr int INSIDE = 39;
    static constexpr int BOX = 40;
    static constexpr int kSize = 64;  // ids 41..63 reserved

    std::vector<std::string> tokens;

    static Vocabulary standard() {
        Vocabulary v;
        v.tokens = {"<pad>", "<bos>", "<eos>", "<box>", "</box>"};
        const char* colors[] = {"red", "green", "blue", "yellow", "purple", "orange", "cyan", "white"};
        for (const char* c : colors) v.tokens.push_back(c);
        for (int i = 0; i < kNumGlyphs; ++i) v.tokens.push_back(std::string(1, static_cast<char>('A' + i)));
        for (int i = 0; i < kNumDigits; ++i) v.tokens.push_back("d" + std::to_string(i));
        v.tokens.insert(v.tokens.end(), {"what_color", "what_glyph", "how_many", "at", "of", "only",
                                         "inside", "box"});
        while (static_cast<int>(v.tokens.size()) < kSize) {
            v.tokens.push_back("reserved_" + std::to_string(v.tokens.size()));
        }
        return v;
    }

    int size() const { return static_cast<int>(tokens.size()); }

    static int color_token(int color) {
        if (color < 0 || color >= kNumColors) throw std::out_of_range("color index");
        return COLOR0 + color;
    }
    static int glyph_token(int glyph) {
        if (glyph < 0 || glyph >= kNumGlyphs) throw std::out_of_range("glyph index");
        return GLYPH0 + glyph;
    }
    static int digit_token(int value) {
        if (value < 0 || value >= kNumDigits) throw std::out_of_range("digit value");
        return DIGIT0 + value;
    }

    // Colors, glyphs, and digits are the only tokens answers may contain.
    static bool is_answer_token(int id) { return id >= COLOR0 && id < DIGIT0 + kNumDigits; }

    // The fixed spatial-constraint clause appended to every question.
    static std::vector<int> constraint_clause() { return {ONLY, INSIDE, BOX}; }
};

// First contiguous run of answer-band tokens in a generated sequence; empty
// when the rollout never produces one.
inline std::vector<int> extract_answer(std::span<const int> generated) {
    std::vector<int> out;
    for (int id : generated) {
        if (Vocabulary::is_answer_token(id)) {
            out.push_back(id);
        } else if (!out.empty()) {
            break;
        }
    }
    return out;
}

}  // namespace opdlab
