import setuptools


if __name__ == '__main__':
    with open('version.txt', 'r') as f:
        version = f.read().strip()

    with open('requirements.txt', 'r') as f:
        requirements = f.read().splitlines()

    with open('README.rst', 'r') as f:
        long_description = f.read()

    setuptools.setup(
        name='pynctr',
        version=version,
        license='BSD',
        python_requires='>=3.10',
        install_requires=requirements,
        description='hbar-deformed topological recursion for the beta = 1 ensemble with exact, double and big-float backends',
        long_description=long_description,
        packages=['pynctr'],
        entry_points={'console_scripts': ['pynctr=pynctr.cli:main']},
        include_package_data=True,
        platforms='any',
        classifiers=[
            'Development Status :: 3 - Alpha',
            'Natural Language :: English',
            'Intended Audience :: Science/Research',
            'License :: OSI Approved :: BSD License',
            'Operating System :: OS Independent',
            'Topic :: Scientific/Engineering :: Mathematics',
            'Topic :: Scientific/Engineering :: Physics',
            'Programming Language :: Python :: 3.10',
            'Programming Language :: Python :: 3 :: Only',
        ],
        zip_safe=False)
