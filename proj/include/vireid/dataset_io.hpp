#pragma once

// Dataset export/import: directory tree ids/<id>/<modality>/<seq>/frame_%03d.png
// plus manifest.json. Requires linking libpng.

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "vireid/synthetic.hpp"

namespace vireid {

namespace pngio {

inline void write_rgb8(const std::string& path, int width, int height, const std::vector<unsigned char>& rgb) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    VIREID_REQUIRE(fp, "cannot open ", path, " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        VIREID_REQUIRE(false, "libpng write failure for ", path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<size_t>(height));
    for (int y = 0; y < height; ++y)
        rows[static_cast<size_t>(y)] = const_cast<png_bytep>(rgb.data() + static_cast<size_t>(y) * width * 3);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

inline void read_rgb8(const std::string& path, int& width, int& height, std::vector<unsigned char>& rgb) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    VIREID_REQUIRE(fp, "cannot open ", path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        VIREID_REQUIRE(false, "libpng read failure for ", path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    width = static_cast<int>(png_get_image_width(png, info));
    height = static_cast<int>(png_get_image_height(png, info));
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
        png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    rgb.assign(static_cast<size_t>(width) * height * 3, 0);
    std::vector<png_bytep> rows(static_cast<size_t>(height));
    for (int y = 0; y < height; ++y)
        rows[static_cast<size_t>(y)] = rgb.data() + static_cast<size_t>(y) * width * 3;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
}

}  // namespace pngio

inline void write_sequence_frames(const std::string& dir, const VideoSequence& seq) {
    std::filesystem::create_directories(dir);
    int T = seq.frames.dim(0), H = seq.frames.dim(2), W = seq.frames.dim(3);
    std::vector<unsigned char> rgb(static_cast<size_t>(H) * W * 3);
    for (int t = 0; t < T; ++t) {
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                for (int c = 0; c < 3; ++c)
                    rgb[(static_cast<size_t>(y) * W + x) * 3 + c] = static_cast<unsigned char>(
                        std::lround(std::min(1.0, std::max(0.0, seq.frames.at(t, c, y, x))) * 255.0));
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%03d.png", t);
        pngio::write_rgb8(dir + "/" + name, W, H, rgb);
    }
}

// Exports sequences under root/ids/... and writes root/manifest.json with
// identity, modality, camera and frame count per sequence.
inline void export_dataset(const std::string& root, const IdentityBank& bank,
                           const std::vector<VideoSequence>& sequences) {
    std::filesystem::create_directories(root);
    nlohmann::json manifest;
    manifest["num_identities"] = bank.num_identities;
    manifest["bank_seed"] = bank.seed;
    manifest["sequences"] = nlohmann::json::array();
    std::map<std::pair<int, int>, int> counters;
    for (const auto& seq : sequences) {
        int idx = counters[{seq.identity, static_cast<int>(seq.modality)}]++;
        std::string rel = "ids/" + std::to_string(seq.identity) + "/" + modality_name(seq.modality) + "/" +
                          std::to_string(idx);
        write_sequence_frames(root + "/" + rel, seq);
        manifest["sequences"].push_back({{"identity", seq.identity},
                                         {"modality", modality_name(seq.modality)},
                                         {"camera", seq.camera_id},
                                         {"frames", seq.frames.dim(0)},
                                         {"path", rel}});
    }
    std::ofstream out(root + "/manifest.json");
    out << manifest.dump(2) << "\n";
}

// Manifest-driven loader; also serves as the adapter entry point for any
// dataset laid out in the same schema.
inline std::vector<VideoSequence> import_dataset(const std::string& root) {
    std::ifstream in(root + "/manifest.json");
    VIREID_REQUIRE(in.good(), "missing manifest.json under ", root);
    nlohmann::json manifest = nlohmann::json::parse(in);
    std::vector<VideoSequence> out;
    for (const auto& entry : manifest.at("sequences")) {
        VideoSequence seq;
        seq.identity = entry.at("identity").get<int>();
        seq.modality = entry.at("modality").get<std::string>() == "infrared" ? Modality::infrared
                                                                             : Modality::visible;
        seq.camera_id = entry.at("camera").get<int>();
        int T = entry.at("frames").get<int>();
        std::string dir = root + "/" + entry.at("path").get<std::string>();
        for (int t = 0; t < T; ++t) {
            char name[32];
            std::snprintf(name, sizeof(name), "frame_%03d.png", t);
            int w = 0, h = 0;
            std::vector<unsigned char> rgb;
            pngio::read_rgb8(dir + "/" + name, w, h, rgb);
            if (t == 0) seq.frames = Tensor({T, 3, h, w});
            VIREID_REQUIRE(h == seq.frames.dim(2) && w == seq.frames.dim(3), "frame size mismatch in ", dir);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    for (int c = 0; c < 3; ++c)
                        seq.frames.at(t, c, y, x) =
                            rgb[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.0;
        }
        out.push_back(std::move(seq));
    }
    return out;
}

}  // namespace vireid
