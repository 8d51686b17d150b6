#include "kohscan/image/image.hpp"

#include <png.h>
#include <zlib.h>
#include <jpeglib.h>

#include <csetjmp>
#include <cstring>
#include <fstream>
#include <iterator>

#include "kohscan/util/error.hpp"

namespace kohscan::image {

Image::Image(int w, int h, int c, std::uint8_t fill)
    : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

namespace {

bool is_png(std::string_view b) { return b.size() >= 8 && std::memcmp(b.data(), "\x89PNG\r\n\x1a\n", 8) == 0; }
bool is_jpeg(std::string_view b) { return b.size() >= 3 && std::memcmp(b.data(), "\xFF\xD8\xFF", 3) == 0; }

Image decode_png(std::string_view bytes) {
    png_image png;
    std::memset(&png, 0, sizeof png);
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
        throw FormatError(std::string("PNG decode failed: ") + png.message);
    }
    const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
    png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    Image img(static_cast<int>(png.width), static_cast<int>(png.height), color ? 3 : 1);
    if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
        std::string msg = png.message;
        png_image_free(&png);
        throw FormatError("PNG decode failed: " + msg);
    }
    return img;
}

struct JpegError {
    jpeg_error_mgr mgr;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

void jpeg_fail(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegError*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

Image decode_jpeg(std::string_view bytes) {
    jpeg_decompress_struct cinfo;
    JpegError err;
    cinfo.err = jpeg_std_error(&err.mgr);
    err.mgr.error_exit = jpeg_fail;
    Image img;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw FormatError(std::string("JPEG decode failed: ") + err.message);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
    jpeg_start_decompress(&cinfo);
    img = Image(static_cast<int>(cinfo.output_width), static_cast<int>(cinfo.output_height),
                static_cast<int>(cinfo.output_components));
    const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = img.pixels.data() + cinfo.output_scanline * stride;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return img;
}

std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open image: " + path.string());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

Image decode(std::string_view bytes) {
    if (bytes.empty()) throw FormatError("empty image payload");
    if (is_png(bytes)) return decode_png(bytes);
    if (is_jpeg(bytes)) return decode_jpeg(bytes);
    throw FormatError("unsupported image format (expected PNG or JPEG)");
}

Image read(const std::filesystem::path& path) {
    try {
        return decode(slurp(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

Dimensions read_dimensions(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open image: " + path.string());
    std::string head(64 * 1024, '\0');
    in.read(head.data(), static_cast<std::streamsize>(head.size()));
    head.resize(static_cast<std::size_t>(in.gcount()));
    if (is_png(head) && head.size() >= 24) {
        auto be32 = [&](std::size_t off) {
            return (static_cast<std::uint32_t>(static_cast<unsigned char>(head[off])) << 24) |
                   (static_cast<std::uint32_t>(static_cast<unsigned char>(head[off + 1])) << 16) |
                   (static_cast<std::uint32_t>(static_cast<unsigned char>(head[off + 2])) << 8) |
                   static_cast<std::uint32_t>(static_cast<unsigned char>(head[off + 3]));
        };
        return {static_cast<int>(be32(16)), static_cast<int>(be32(20))};
    }
    const Image img = read(path);
    return {img.width, img.height};
}

std::string encode_png(const Image& img, int compression) {
    if (img.channels != 1 && img.channels != 3) throw PreconditionError("PNG encoder supports 1 or 3 channels");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    std::string out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("PNG encode failed");
    }
    png_set_write_fn(
        png, &out,
        [](png_structp p, png_bytep data, png_size_t len) {
            static_cast<std::string*>(png_get_io_ptr(p))->append(reinterpret_cast<const char*>(data), len);
        },
        nullptr);
    png_set_compression_level(png, compression);
    if (compression <= 1) {
        // Fast path for noisy scans: one cheap filter, entropy coding only.
        png_set_filter(png, 0, PNG_FILTER_SUB);
        png_set_compression_strategy(png, Z_HUFFMAN_ONLY);
    }
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
    for (int y = 0; y < img.height; ++y) {
        png_write_row(png, const_cast<png_bytep>(img.pixels.data() + y * stride));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

void write_png(const std::filesystem::path& path, const Image& img, int compression) {
    const std::string bytes = encode_png(img, compression);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write image: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing image: " + path.string());
}

Image to_gray(const Image& img) {
    if (img.channels == 1) return img;
    if (img.channels != 3) throw PreconditionError("expected a gray or RGB image");
    Image g(img.width, img.height, 1);
    for (std::size_t i = 0; i < g.pixels.size(); ++i) {
        const double y = 0.299 * img.pixels[3 * i] + 0.587 * img.pixels[3 * i + 1] + 0.114 * img.pixels[3 * i + 2];
        g.pixels[i] = static_cast<std::uint8_t>(std::min(255.0, y + 0.5));
    }
    return g;
}

Image to_rgb(const Image& img) {
    if (img.channels == 3) return img;
    Image rgb(img.width, img.height, 3);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        rgb.pixels[3 * i] = rgb.pixels[3 * i + 1] = rgb.pixels[3 * i + 2] = img.pixels[i];
    }
    return rgb;
}

Image crop(const Image& img, int x, int y, int w, int h) {
    if (x < 0 || y < 0 || w < 0 || h < 0 || x + w > img.width || y + h > img.height) {
        throw PreconditionError("crop rectangle outside image");
    }
    Image out(w, h, img.channels);
    const std::size_t row = static_cast<std::size_t>(w) * img.channels;
    for (int r = 0; r < h; ++r) {
        std::memcpy(out.pixels.data() + r * row,
                    img.pixels.data() + ((static_cast<std::size_t>(y) + r) * img.width + x) * img.channels, row);
    }
    return out;
}

Mask crop(const Mask& mask, int x, int y, int w, int h) {
    if (x < 0 || y < 0 || w < 0 || h < 0 || x + w > mask.width || y + h > mask.height) {
        throw PreconditionError("crop rectangle outside mask");
    }
    Mask out(w, h);
    for (int r = 0; r < h; ++r) {
        std::memcpy(out.bits.data() + static_cast<std::size_t>(r) * w,
                    mask.bits.data() + (static_cast<std::size_t>(y) + r) * mask.width + x, static_cast<std::size_t>(w));
    }
    return out;
}

}  // namespace kohscan::image
