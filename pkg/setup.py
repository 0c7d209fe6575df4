"""Python package setup."""
import setuptools

with open("README.md", "r", encoding="UTF-8") as fh:
    long_description = fh.read()

setuptools.setup(
    name="qwsr",
    version="0.1.0",
    description="Latent diffusion image super-resolution conditioned on quaternion wavelet sub-bands.",
    long_description=long_description,
    long_description_content_type="text/markdown",
    platforms=["POSIX", "Windows"],
    packages=["qwsr"],
    package_data={"qwsr": ["py.typed"]},
    py_modules=["qwsr_cli"],
    entry_points={"console_scripts": ["qwsr=qwsr_cli:main"]},
    keywords=[
        "super-resolution",
        "diffusion",
        "ddim",
        "wavelet",
        "dual-tree",
        "quaternion wavelet",
        "psnr",
        "ssim",
    ],
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.9",
    install_requires=[
        "construct",
        "pycryptodome",
        "numpy",
        "scipy",
        "PyWavelets",
        "torch",
        "Pillow",
        "tqdm",
    ],
)
