import faker.providers

from tests.faker.cohort_provider import CohortProvider

fake = faker.Faker()
faker.Faker.seed(0)

fake.add_provider(CohortProvider)
