#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "duet/config.hpp"
#include "duet/error.hpp"
#include "duet/image.hpp"
#include "duet/rng.hpp"

namespace duet {

// ---------------------------------------------------------------------------
// scene parameters
// ---------------------------------------------------------------------------

constexpr int kNumModalities = 8;

inline const std::array<std::string, kNumModalities>& modality_names() {
    static const std::array<std::string, kNumModalities> names = {
        "pseudo-cxr",    "pseudo-ct",     "pseudo-mri",  "pseudo-ultrasound",
        "pseudo-fundus", "pseudo-dermoscopy", "pseudo-pet", "pseudo-histology"};
    return names;
}

enum class ShapeKind : int { CIRCLE = 0, SQUARE = 1, CROSS = 2 };

inline const char* shape_name(ShapeKind s) {
    switch (s) {
        case ShapeKind::CIRCLE: return "circle";
        case ShapeKind::SQUARE: return "square";
        case ShapeKind::CROSS: return "cross";
    }
    throw ParamError("shape_name: bad enum");
}

/// Discrete scene grid. Every field takes finitely many values, the caption
/// template encodes all of them, and rendering is a pure function of the
/// fields, so caption -> params -> image is exact.
struct SceneParams {
    int modality = 0;        // index into modality_names()
    ShapeKind shape = ShapeKind::CIRCLE;
    int pos_row = 1;         // 0..2, top/middle/bottom
    int pos_col = 1;         // 0..2, left/center/right
    int radius = 4;          // 3..5 pixels
    bool bright = true;      // foreground intensity bucket
    bool light_field = false;  // background bucket
    bool lesion = false;
    int lesion_radius = 1;   // 1..2, ignored unless lesion
    bool stained = false;    // photometric-negative palette
    bool shape_present = true;  // false renders pure background

    void validate() const {
        if (modality < 0 || modality >= kNumModalities) throw ValidationError("SceneParams: bad modality");
        if (pos_row < 0 || pos_row > 2 || pos_col < 0 || pos_col > 2)
            throw ValidationError("SceneParams: position bucket outside 3x3 grid");
        if (radius < 3 || radius > 5) throw ValidationError("SceneParams: radius outside 3..5");
        if (lesion_radius < 1 || lesion_radius > 2) throw ValidationError("SceneParams: lesion radius outside 1..2");
    }

    /// 8-bit background level after modality shift and palette.
    int background_k() const {
        int k = (light_field ? 140 : 40) + 4 * modality;
        return stained ? 255 - k : k;
    }
    double background_level() const { return background_k() / 255.0; }

    bool operator==(const SceneParams&) const = default;
};

inline SceneParams random_scene(Rng& rng) {
    SceneParams p;
    p.modality = static_cast<int>(rng.below(kNumModalities));
    p.shape = static_cast<ShapeKind>(rng.below(3));
    p.pos_row = static_cast<int>(rng.below(3));
    p.pos_col = static_cast<int>(rng.below(3));
    p.radius = 3 + static_cast<int>(rng.below(3));
    p.bright = rng.below(2) == 1;
    p.light_field = rng.below(2) == 1;
    p.lesion = rng.below(2) == 1;
    p.lesion_radius = 1 + static_cast<int>(rng.below(2));
    return p;
}

/// Misalignment perturbation: the radius word in the caption cycles one step,
/// so a perturbed caption stays parseable but no longer matches the render.
inline SceneParams perturb_radius(SceneParams p) {
    p.radius = 3 + (p.radius - 3 + 1) % 3;
    return p;
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

namespace detail {

inline std::int64_t bucket_coord(int bucket, std::int64_t size) {
    const std::int64_t lanes[3] = {5, 8, 10};
    return lanes[bucket] * size / 16;
}

inline bool inside_shape(const SceneParams& p, std::int64_t y, std::int64_t x, std::int64_t cy,
                         std::int64_t cx) {
    const std::int64_t dy = y - cy, dx = x - cx, r = p.radius;
    switch (p.shape) {
        case ShapeKind::CIRCLE: return dy * dy + dx * dx <= r * r;
        case ShapeKind::SQUARE: return std::abs(dy) <= r && std::abs(dx) <= r;
        case ShapeKind::CROSS:
            return (std::abs(dx) <= 1 && std::abs(dy) <= r) || (std::abs(dy) <= 1 && std::abs(dx) <= r);
    }
    throw ParamError("inside_shape: bad enum");
}

inline bool inside_lesion(const SceneParams& p, std::int64_t y, std::int64_t x, std::int64_t cy,
                          std::int64_t cx) {
    const std::int64_t ly = cy + 2, lx = cx + 2, r = p.lesion_radius;
    const std::int64_t dy = y - ly, dx = x - lx;
    return dy * dy + dx * dx <= r * r;
}

}  // namespace detail

/// Deterministic raster: background + shape (+ lesion spot), all levels on
/// the 8-bit grid, modality shifting the palette, stain inverting it.
inline Image render(const SceneParams& p, std::int64_t size = 16) {
    p.validate();
    if (size < 16) throw ValidationError("render: size below 16");
    const std::int64_t cy = detail::bucket_coord(p.pos_row, size);
    const std::int64_t cx = detail::bucket_coord(p.pos_col, size);
    if (cy - p.radius < 0 || cy + p.radius >= size || cx - p.radius < 0 || cx + p.radius >= size)
        throw ValidationError("render: shape geometry out of bounds");
    if (p.lesion && (cy + 2 + p.lesion_radius >= size || cx + 2 + p.lesion_radius >= size))
        throw ValidationError("render: lesion geometry out of bounds");

    const int shift = 4 * p.modality;
    const int k_bg = (p.light_field ? 140 : 40) + shift;
    const int k_fg = (p.bright ? 216 : 80) + shift;
    const int k_lesion = 250;
    Image img(size, size, 1, 0.0, modality_names()[static_cast<std::size_t>(p.modality)]);
    for (std::int64_t y = 0; y < size; ++y)
        for (std::int64_t x = 0; x < size; ++x) {
            int k = k_bg;
            if (p.shape_present && detail::inside_shape(p, y, x, cy, cx)) k = k_fg;
            if (p.shape_present && p.lesion && detail::inside_lesion(p, y, x, cy, cx)) k = k_lesion;
            if (p.stained) k = 255 - k;
            img.at(y, x) = k / 255.0;
        }
    return img;
}

/// Binary mask of the main shape (lesion not included).
inline Image segment_mask(const SceneParams& p, std::int64_t size = 16) {
    p.validate();
    const std::int64_t cy = detail::bucket_coord(p.pos_row, size);
    const std::int64_t cx = detail::bucket_coord(p.pos_col, size);
    Image img(size, size, 1, 0.0, "mask");
    for (std::int64_t y = 0; y < size; ++y)
        for (std::int64_t x = 0; x < size; ++x)
            img.at(y, x) = detail::inside_shape(p, y, x, cy, cx) ? 1.0 : 0.0;
    return img;
}

/// Bounding box [y0,y1) x [x0,x1) of the lesion disc, clipped to the
/// raster; the only region a lesion toggle may touch.
inline PixelBox lesion_box(const SceneParams& p, std::int64_t size = 16) {
    const std::int64_t cy = detail::bucket_coord(p.pos_row, size) + 2;
    const std::int64_t cx = detail::bucket_coord(p.pos_col, size) + 2;
    const std::int64_t r = p.lesion_radius;
    return {std::max<std::int64_t>(0, cy - r), std::max<std::int64_t>(0, cx - r),
            std::min(size, cy + r + 1), std::min(size, cx + r + 1)};
}

// ---------------------------------------------------------------------------
// caption template
// ---------------------------------------------------------------------------

inline const char* position_phrase(int row, int col) {
    static const char* names[9] = {"top left",    "top center",    "top right",
                                   "middle left", "center",        "middle right",
                                   "bottom left", "bottom center", "bottom right"};
    return names[row * 3 + col];
}

/// Fixed template covering every grid field, injective over the grid:
/// "a <modality> image showing a <dim|bright> <shape> of radius <r> at the
///  <position> with <a lesion of radius <lr>|no lesion> on a <dark|light>
///  field[ under a stain palette]"
inline std::string caption(const SceneParams& p) {
    p.validate();
    if (!p.shape_present) throw ContractError("caption: background-only scene has no caption");
    std::ostringstream os;
    os << "a " << modality_names()[static_cast<std::size_t>(p.modality)] << " image showing a "
       << (p.bright ? "bright" : "dim") << " " << shape_name(p.shape) << " of radius " << p.radius
       << " at the " << position_phrase(p.pos_row, p.pos_col) << " with ";
    if (p.lesion) os << "a lesion of radius " << p.lesion_radius;
    else os << "no lesion";
    os << " on a " << (p.light_field ? "light" : "dark") << " field";
    if (p.stained) os << " under a stain palette";
    return os.str();
}

/// Inverse of caption(); rejects anything off-template.
inline SceneParams parse_caption(const std::string& text) {
    std::vector<std::string> w;
    {
        std::istringstream is(text);
        std::string tok;
        while (is >> tok) w.push_back(tok);
    }
    std::size_t i = 0;
    auto fail = [&](const std::string& why) -> SceneParams {
        throw ValidationError("parse_caption: " + why + " in \"" + text + "\"");
    };
    auto expect = [&](const char* word) {
        if (i >= w.size() || w[i] != word) fail(std::string("expected '") + word + "'");
        ++i;
    };
    auto next = [&]() -> const std::string& {
        if (i >= w.size()) fail("truncated");
        return w[i++];
    };

    SceneParams p;
    expect("a");
    {
        const std::string& m = next();
        int found = -1;
        for (int k = 0; k < kNumModalities; ++k)
            if (modality_names()[static_cast<std::size_t>(k)] == m) found = k;
        if (found < 0) fail("unknown modality '" + m + "'");
        p.modality = found;
    }
    expect("image");
    expect("showing");
    expect("a");
    {
        const std::string& b = next();
        if (b == "bright") p.bright = true;
        else if (b == "dim") p.bright = false;
        else fail("unknown intensity '" + b + "'");
    }
    {
        const std::string& s = next();
        if (s == "circle") p.shape = ShapeKind::CIRCLE;
        else if (s == "square") p.shape = ShapeKind::SQUARE;
        else if (s == "cross") p.shape = ShapeKind::CROSS;
        else fail("unknown shape '" + s + "'");
    }
    expect("of");
    expect("radius");
    {
        const std::string& r = next();
        if (r.size() != 1 || r[0] < '3' || r[0] > '5') fail("bad radius '" + r + "'");
        p.radius = r[0] - '0';
    }
    expect("at");
    expect("the");
    {
        std::string phrase = next();
        if (phrase != "center") phrase += " " + next();
        int found = -1;
        for (int rr = 0; rr < 3; ++rr)
            for (int cc = 0; cc < 3; ++cc)
                if (phrase == position_phrase(rr, cc)) found = rr * 3 + cc;
        if (found < 0) fail("unknown position '" + phrase + "'");
        p.pos_row = found / 3;
        p.pos_col = found % 3;
    }
    expect("with");
    {
        const std::string& l = next();
        if (l == "no") {
            p.lesion = false;
            expect("lesion");
        } else if (l == "a") {
            expect("lesion");
            expect("of");
            expect("radius");
            const std::string& lr = next();
            if (lr.size() != 1 || lr[0] < '1' || lr[0] > '2') fail("bad lesion radius '" + lr + "'");
            p.lesion = true;
            p.lesion_radius = lr[0] - '0';
        } else {
            fail("unknown lesion clause '" + l + "'");
        }
    }
    expect("on");
    expect("a");
    {
        const std::string& f = next();
        if (f == "light") p.light_field = true;
        else if (f == "dark") p.light_field = false;
        else fail("unknown field '" + f + "'");
    }
    expect("field");
    if (i < w.size()) {
        expect("under");
        expect("a");
        expect("stain");
        expect("palette");
        p.stained = true;
    }
    if (i != w.size()) fail("trailing words");
    p.validate();
    return p;
}

// ---------------------------------------------------------------------------
// params serialization (manifest column)
// ---------------------------------------------------------------------------

inline std::string params_to_string(const SceneParams& p) {
    std::ostringstream os;
    os << "m=" << p.modality << ";s=" << static_cast<int>(p.shape) << ";pr=" << p.pos_row
       << ";pc=" << p.pos_col << ";r=" << p.radius << ";br=" << (p.bright ? 1 : 0)
       << ";lf=" << (p.light_field ? 1 : 0) << ";le=" << (p.lesion ? 1 : 0)
       << ";lw=" << p.lesion_radius << ";st=" << (p.stained ? 1 : 0);
    return os.str();
}

inline SceneParams params_from_string(const std::string& s) {
    SceneParams p;
    std::istringstream is(s);
    std::string item;
    int seen = 0;
    while (std::getline(is, item, ';')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw ValidationError("params_from_string: bad item '" + item + "'");
        const std::string key = item.substr(0, eq);
        int v;
        try {
            v = std::stoi(item.substr(eq + 1));
        } catch (const std::exception&) {
            throw ValidationError("params_from_string: bad value in '" + item + "'");
        }
        ++seen;
        if (key == "m") p.modality = v;
        else if (key == "s") p.shape = static_cast<ShapeKind>(v);
        else if (key == "pr") p.pos_row = v;
        else if (key == "pc") p.pos_col = v;
        else if (key == "r") p.radius = v;
        else if (key == "br") p.bright = v != 0;
        else if (key == "lf") p.light_field = v != 0;
        else if (key == "le") p.lesion = v != 0;
        else if (key == "lw") p.lesion_radius = v;
        else if (key == "st") p.stained = v != 0;
        else throw ValidationError("params_from_string: unknown key '" + key + "'");
    }
    if (seen != 10) throw ValidationError("params_from_string: expected 10 fields, got " + std::to_string(seen));
    p.validate();
    return p;
}

// ---------------------------------------------------------------------------
// samples
// ---------------------------------------------------------------------------

enum class InterleavedKind { SEGMENT, SUPERRES, COUNTERFACTUAL, STAIN, CROSSMODAL };

inline const char* kind_name(InterleavedKind k) {
    switch (k) {
        case InterleavedKind::SEGMENT: return "segment";
        case InterleavedKind::SUPERRES: return "superres";
        case InterleavedKind::COUNTERFACTUAL: return "counterfactual";
        case InterleavedKind::STAIN: return "stain";
        case InterleavedKind::CROSSMODAL: return "crossmodal";
    }
    throw ParamError("kind_name: bad enum");
}

inline InterleavedKind kind_from(const std::string& s) {
    if (s == "segment") return InterleavedKind::SEGMENT;
    if (s == "superres") return InterleavedKind::SUPERRES;
    if (s == "counterfactual") return InterleavedKind::COUNTERFACTUAL;
    if (s == "stain") return InterleavedKind::STAIN;
    if (s == "crossmodal") return InterleavedKind::CROSSMODAL;
    throw ValidationError("unknown interleaved kind '" + s + "'");
}

/// One training/eval record. Text fields are empty strings when absent.
/// caption always describes the scene of params_in rendered at full size;
/// for most records that is x_v, for T2I and SUPERRES it is a_v.
struct Sample {
    std::string id;
    TaskCategory task = TaskCategory::TEXT;
    std::optional<InterleavedKind> kind;
    std::string caption;  // scene caption used for quality scoring
    std::string q;
    std::string k;        // knowledge context (pseudo-modality name stand-in)
    std::string a_t;
    std::string think;    // includes the <think>...</think> markers
    std::optional<Image> x_v;
    std::optional<Image> a_v;
    std::optional<SceneParams> params_in;
    std::optional<SceneParams> params_out;
    std::string img_in_path;   // manifest-relative, set by write/load
    std::string img_out_path;

    void validate() const {
        if (id.empty()) throw ContractError("Sample: empty id");
        switch (task) {
            case TaskCategory::TEXT:
                if (x_v || a_v) throw ContractError("Sample " + id + ": TEXT carries an image");
                if (a_t.empty()) throw ContractError("Sample " + id + ": TEXT without answer text");
                break;
            case TaskCategory::I2T:
                if (!x_v || a_t.empty()) throw ContractError("Sample " + id + ": I2T needs x_v and a_t");
                break;
            case TaskCategory::T2I:
                if (!a_v || a_t.empty() || x_v)
                    throw ContractError("Sample " + id + ": T2I needs caption text and a_v only");
                break;
            case TaskCategory::INTERLEAVED:
                if (!kind) throw ContractError("Sample " + id + ": INTERLEAVED without kind");
                if (!x_v || !a_v) throw ContractError("Sample " + id + ": INTERLEAVED needs both images");
                if (q.empty() && a_t.empty() && k.empty() && think.empty())
                    throw ContractError("Sample " + id + ": INTERLEAVED without any text");
                break;
        }
        if (!think.empty()) {
            if (think.rfind("<think>", 0) != 0 || !think.ends_with("</think>"))
                throw ContractError("Sample " + id + ": think text missing markers");
        }
        if ((x_v || a_v) && caption.empty())
            throw ContractError("Sample " + id + ": image-bearing record without caption");
    }

    bool has_image() const { return x_v.has_value() || a_v.has_value(); }

    /// The image the caption describes (the quality scorer's target).
    const Image& scored_image() const {
        if (task == TaskCategory::T2I) return *a_v;
        if (kind && *kind == InterleavedKind::SUPERRES) return *a_v;
        if (x_v) return *x_v;
        if (a_v) return *a_v;
        throw ContractError("Sample " + id + ": no image to score");
    }

    /// Text whose length the coarse filter checks: the caption when the
    /// record has one, otherwise its main text field.
    const std::string& filtered_text() const {
        if (!caption.empty()) return caption;
        if (!a_t.empty()) return a_t;
        return q;
    }
};

// ---------------------------------------------------------------------------
// sample construction
// ---------------------------------------------------------------------------

inline std::string think_text(const SceneParams& p) {
    std::ostringstream os;
    os << "<think>the field is " << (p.light_field ? "light" : "dark") << ". the main shape is a "
       << (p.bright ? "bright" : "dim") << " " << shape_name(p.shape) << " of radius " << p.radius
       << " at the " << position_phrase(p.pos_row, p.pos_col) << ". a lesion is "
       << (p.lesion ? "present" : "absent") << ".</think>";
    return os.str();
}

constexpr int kQuestionBank = 5;

inline std::string question_text(int qid) {
    switch (qid) {
        case 0: return "is a lesion present?";
        case 1: return "what shape is shown?";
        case 2: return "what is the radius of the shape?";
        case 3: return "where is the shape located?";
        case 4: return "what kind of image is this?";
    }
    throw ParamError("question_text: bad question id");
}

inline std::string answer_text(int qid, const SceneParams& p) {
    switch (qid) {
        case 0: return p.lesion ? "yes" : "no";
        case 1: return shape_name(p.shape);
        case 2: return std::to_string(p.radius);
        case 3: return position_phrase(p.pos_row, p.pos_col);
        case 4: return modality_names()[static_cast<std::size_t>(p.modality)];
    }
    throw ParamError("answer_text: bad question id");
}

inline Sample make_text_sample(const SceneParams& p) {
    const auto& mod = modality_names()[static_cast<std::size_t>(p.modality)];
    Sample s;
    s.task = TaskCategory::TEXT;
    s.q = "describe a typical " + mod + " scan.";
    s.k = mod;
    s.a_t = "a typical " + mod + " scan shows a single clearly bounded shape on a uniform field.";
    return s;
}

/// Question-answer record about the rendered scene; optional templated
/// reasoning between <think> markers ahead of the answer.
inline Sample make_instruction(const SceneParams& p, bool with_think, int qid,
                               std::int64_t size = 16) {
    Sample s;
    s.task = TaskCategory::I2T;
    s.params_in = p;
    s.x_v = render(p, size);
    s.caption = caption(p);
    s.q = question_text(qid);
    s.k = modality_names()[static_cast<std::size_t>(p.modality)];
    s.a_t = answer_text(qid, p);
    if (with_think) s.think = think_text(p);
    return s;
}

inline Sample make_report(const SceneParams& p, const std::string& cap, std::int64_t size = 16) {
    Sample s;
    s.task = TaskCategory::I2T;
    s.params_in = p;
    s.x_v = render(p, size);
    s.caption = cap;
    s.q = "describe this image.";
    s.k = modality_names()[static_cast<std::size_t>(p.modality)];
    s.a_t = cap;
    return s;
}

inline Sample make_t2i(const SceneParams& p, const std::string& cap, std::int64_t size = 16) {
    Sample s;
    s.task = TaskCategory::T2I;
    s.params_in = p;
    s.a_v = render(p, size);
    s.caption = cap;
    s.k = modality_names()[static_cast<std::size_t>(p.modality)];
    s.a_t = cap;
    return s;
}

inline Sample make_interleaved(InterleavedKind kind, const SceneParams& p, std::int64_t size = 16) {
    Sample s;
    s.task = TaskCategory::INTERLEAVED;
    s.kind = kind;
    s.params_in = p;
    s.caption = caption(p);
    s.k = modality_names()[static_cast<std::size_t>(p.modality)];
    const auto& mod = s.k;
    switch (kind) {
        case InterleavedKind::SEGMENT: {
            s.x_v = render(p, size);
            s.a_v = segment_mask(p, size);
            std::ostringstream os;
            os << "segment the " << (p.bright ? "bright" : "dim") << " " << shape_name(p.shape)
               << " in this " << mod << " image.";
            s.a_t = os.str();
            break;
        }
        case InterleavedKind::SUPERRES: {
            s.a_v = render(p, size);
            s.x_v = quantize8(box_downsample(*s.a_v, 4));
            s.a_t = "increase the resolution of this " + mod + " image by a factor of 4.";
            break;
        }
        case InterleavedKind::COUNTERFACTUAL: {
            SceneParams edited = p;
            edited.lesion = !p.lesion;
            s.params_out = edited;
            s.x_v = render(p, size);
            s.a_v = render(edited, size);
            const std::string lr = std::to_string(p.lesion_radius);
            if (p.lesion) {
                s.q = "remove the lesion from this image.";
                s.a_t = "the lesion of radius " + lr + " has been removed.";
            } else {
                s.q = "add a lesion of radius " + lr + " to this image.";
                s.a_t = "a lesion of radius " + lr + " has been added.";
            }
            break;
        }
        case InterleavedKind::STAIN: {
            SceneParams stained = p;
            stained.stained = true;
            s.params_out = stained;
            s.x_v = render(p, size);
            s.a_v = render(stained, size);
            s.a_t = "apply virtual staining to this " + mod + " image.";
            break;
        }
        case InterleavedKind::CROSSMODAL: {
            SceneParams other = p;
            other.modality = (p.modality + 1) % kNumModalities;
            s.params_out = other;
            s.x_v = render(p, size);
            s.a_v = render(other, size);
            s.a_t = "synthesize the matching " +
                    modality_names()[static_cast<std::size_t>(other.modality)] + " image from this " +
                    mod + " image.";
            break;
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// corpus
// ---------------------------------------------------------------------------

struct CorpusSpec {
    std::string split = "train";
    std::int64_t n_text = 16;
    std::int64_t n_i2t = 48;
    std::int64_t n_t2i = 32;
    std::int64_t n_per_kind = 4;  // each of the five interleaved kinds
    std::int64_t image_size = 16;
    double misalign_fraction = 0.1;  // captions drawn from perturbed params
    double vqa_fraction = 0.5;       // of i2t records, question-answer style
    double think_fraction = 0.5;     // of vqa records, carry reasoning text

    void validate() const {
        if (n_text < 0 || n_i2t < 0 || n_t2i < 0 || n_per_kind < 0)
            throw ParamError("CorpusSpec: negative count");
        if (image_size < 16) throw ParamError("CorpusSpec: image_size below 16");
        if (misalign_fraction < 0.0 || misalign_fraction > 1.0 || vqa_fraction < 0.0 ||
            vqa_fraction > 1.0 || think_fraction < 0.0 || think_fraction > 1.0)
            throw ParamError("CorpusSpec: fraction outside [0,1]");
        if (split != "train" && split != "eval") throw ParamError("CorpusSpec: split must be train or eval");
    }

    static CorpusSpec from_kv(const KvFile& kv, const std::string& split) {
        CorpusSpec c;
        c.split = split;
        const std::string p = "data." + split + ".";
        c.n_text = kv.get_i64(p + "n_text", split == "train" ? 16 : 8);
        c.n_i2t = kv.get_i64(p + "n_i2t", split == "train" ? 48 : 16);
        c.n_t2i = kv.get_i64(p + "n_t2i", split == "train" ? 32 : 12);
        c.n_per_kind = kv.get_i64(p + "n_per_kind", split == "train" ? 4 : 2);
        c.image_size = kv.get_i64("data.image_size", 16);
        c.misalign_fraction = kv.get_f64(p + "misalign_fraction", split == "train" ? 0.1 : 0.0);
        c.vqa_fraction = kv.get_f64(p + "vqa_fraction", 0.5);
        c.think_fraction = kv.get_f64(p + "think_fraction", 0.5);
        c.validate();
        return c;
    }
};

namespace detail {

inline std::string sample_id(const std::string& split, const std::string& tag, std::int64_t i) {
    std::ostringstream os;
    os << split << "-" << tag << "-";
    std::string n = std::to_string(i);
    for (std::size_t k = n.size(); k < 4; ++k) os << '0';
    os << n;
    return os.str();
}

}  // namespace detail

/// Pure function of (spec, seed): per-record streams are derived from the
/// record's category and index, so corpus content is independent of
/// generation order.
inline std::vector<Sample> build_corpus(const CorpusSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::vector<Sample> out;

    for (std::int64_t i = 0; i < spec.n_text; ++i) {
        Rng rng(derive_seed(seed, spec.split + "-text", static_cast<std::uint64_t>(i)));
        Sample s = make_text_sample(random_scene(rng));
        s.id = detail::sample_id(spec.split, "text", i);
        s.validate();
        out.push_back(std::move(s));
    }
    for (std::int64_t i = 0; i < spec.n_i2t; ++i) {
        Rng rng(derive_seed(seed, spec.split + "-i2t", static_cast<std::uint64_t>(i)));
        const SceneParams p = random_scene(rng);
        const bool vqa = rng.uniform() < spec.vqa_fraction;
        const bool misaligned = rng.uniform() < spec.misalign_fraction;
        const bool with_think = rng.uniform() < spec.think_fraction;
        const int qid = static_cast<int>(rng.below(kQuestionBank));
        Sample s;
        if (vqa) {
            s = make_instruction(p, with_think, qid, spec.image_size);
            if (misaligned) s.caption = caption(perturb_radius(p));
        } else {
            const std::string cap = caption(misaligned ? perturb_radius(p) : p);
            s = make_report(p, cap, spec.image_size);
        }
        s.id = detail::sample_id(spec.split, "i2t", i);
        s.validate();
        out.push_back(std::move(s));
    }
    for (std::int64_t i = 0; i < spec.n_t2i; ++i) {
        Rng rng(derive_seed(seed, spec.split + "-t2i", static_cast<std::uint64_t>(i)));
        const SceneParams p = random_scene(rng);
        const bool misaligned = rng.uniform() < spec.misalign_fraction;
        Sample s = make_t2i(p, caption(misaligned ? perturb_radius(p) : p), spec.image_size);
        s.id = detail::sample_id(spec.split, "t2i", i);
        s.validate();
        out.push_back(std::move(s));
    }
    for (InterleavedKind kind : {InterleavedKind::SEGMENT, InterleavedKind::SUPERRES,
                                 InterleavedKind::COUNTERFACTUAL, InterleavedKind::STAIN,
                                 InterleavedKind::CROSSMODAL}) {
        for (std::int64_t i = 0; i < spec.n_per_kind; ++i) {
            Rng rng(derive_seed(seed, spec.split + "-inter-" + kind_name(kind),
                                static_cast<std::uint64_t>(i)));
            Sample s = make_interleaved(kind, random_scene(rng), spec.image_size);
            s.id = detail::sample_id(spec.split, std::string("inter-") + kind_name(kind), i);
            s.validate();
            out.push_back(std::move(s));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// manifest I/O
// ---------------------------------------------------------------------------

/// Tab-separated manifest, one record per line, '-' for absent fields:
///   id  task  img_in  img_out  caption  q  k  a_t  think  params_in  params_out
/// Image paths are relative to the manifest; pixels 8-bit PGM/PPM.
inline void write_corpus(std::vector<Sample>& samples, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    auto field = [](const std::string& s) -> const std::string& {
        static const std::string dash = "-";
        if (s.empty()) return dash;
        if (s.find('\t') != std::string::npos || s.find('\n') != std::string::npos)
            throw ContractError("manifest field contains separator: " + s);
        return s;
    };
    std::ofstream os(fs::path(dir) / "manifest.tsv");
    if (!os) throw IoError("write_corpus: cannot open manifest in " + dir);
    for (auto& s : samples) {
        s.validate();
        if (s.x_v) {
            s.img_in_path = "images/" + s.id + "-in." + (s.x_v->channels == 1 ? "pgm" : "ppm");
            write_pnm((fs::path(dir) / s.img_in_path).string(), *s.x_v);
        }
        if (s.a_v) {
            s.img_out_path = "images/" + s.id + "-out." + (s.a_v->channels == 1 ? "pgm" : "ppm");
            write_pnm((fs::path(dir) / s.img_out_path).string(), *s.a_v);
        }
        std::string task = category_name(s.task);
        if (s.kind) task += std::string(":") + kind_name(*s.kind);
        os << s.id << '\t' << task << '\t' << field(s.img_in_path) << '\t' << field(s.img_out_path)
           << '\t' << field(s.caption) << '\t' << field(s.q) << '\t' << field(s.k) << '\t'
           << field(s.a_t) << '\t' << field(s.think) << '\t'
           << field(s.params_in ? params_to_string(*s.params_in) : "") << '\t'
           << field(s.params_out ? params_to_string(*s.params_out) : "") << '\n';
    }
    if (!os) throw IoError("write_corpus: manifest write failed");
}

inline std::vector<Sample> load_corpus(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    std::ifstream is(manifest_path);
    if (!is) throw IoError("load_corpus: cannot open " + manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();
    std::vector<Sample> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::size_t start = 0;
        while (true) {
            const auto tab = line.find('\t', start);
            cols.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (cols.size() != 11)
            throw ValidationError("load_corpus: line " + std::to_string(lineno) + " has " +
                                  std::to_string(cols.size()) + " columns, want 11");
        auto opt = [](const std::string& s) { return s == "-" ? std::string() : s; };
        Sample s;
        s.id = cols[0];
        {
            const auto colon = cols[1].find(':');
            s.task = category_from(colon == std::string::npos ? cols[1] : cols[1].substr(0, colon));
            if (colon != std::string::npos) s.kind = kind_from(cols[1].substr(colon + 1));
        }
        s.img_in_path = opt(cols[2]);
        s.img_out_path = opt(cols[3]);
        s.caption = opt(cols[4]);
        s.q = opt(cols[5]);
        s.k = opt(cols[6]);
        s.a_t = opt(cols[7]);
        s.think = opt(cols[8]);
        if (!opt(cols[9]).empty()) s.params_in = params_from_string(cols[9]);
        if (!opt(cols[10]).empty()) s.params_out = params_from_string(cols[10]);
        if (!s.img_in_path.empty()) s.x_v = read_pnm((base / s.img_in_path).string());
        if (!s.img_out_path.empty()) s.a_v = read_pnm((base / s.img_out_path).string());
        s.validate();
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace duet
